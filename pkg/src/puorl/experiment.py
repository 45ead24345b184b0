"""Config-driven runner: problem -> classifier -> arms x seeds -> result table.

Every stage writes its artifact under ``output_dir`` with a name derived
from the SHA-256 of the config blocks it depends on, and a stage whose
artifact already exists is loaded instead of recomputed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import baselines, envs, filtering, nn_core, offline_rl, pu_learn
from .baselines import Arm
from .data import PuorlProblem, build_problem, concat, load, save
from .data.dataset import atomic_write
from .errors import ConfigError, PuorlError

log = logging.getLogger(__name__)

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "shift": "body_mass",
    "problem": {
        "positive": {},
        "negatives": None,
        "eta": None,
        "qualities": ["ME", "ME"],
        "total_count": 100000,
        "alpha_p": 0.3,
        "labeled_ratio": 0.01,
        "seed": 0,
    },
    "classifier": {
        "input_mode": "dynamics",
        "hidden": [64, 64, 64],
        "lr": 1e-3,
        "epochs_warmup": 10,
        "epochs_main": 100,
        "batch_size": 256,
        "threshold": 0.5,
        "seeds": [0],
    },
    "rl": {
        "agent_kind": "td3bc",
        "steps": 50000,
        "batch_size": 256,
        "hidden": [128, 128],
        "seeds": [0, 1, 2, 3, 4],
        "eval_episodes": 10,
    },
    "anchors": {"episodes": 1000, "seed": 20240},
    "baselines": {
        "dara": {"eta": 0.1, "steps": 5000, "batch_size": 256, "hidden": [64, 64], "input_noise": 1.0},
        "igdf": {"xi": 0.75, "rep_dim": 64, "encoder_steps": 7000, "batch_size": 256, "hidden": [64, 64]},
    },
    "arms": ["OLP", "SharingAll", "DARA", "IGDF", "Ours", "Oracle"],
    "output_dir": "runs/default",
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("positive",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d):
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    def to_dict(self):
        return copy.deepcopy(self.raw)

    # resolved pieces
    @property
    def shift(self):
        return self.raw["shift"]

    @property
    def quality(self):
        return "/".join(self.raw["problem"]["qualities"])

    @property
    def output_dir(self):
        return self.raw["output_dir"]

    @property
    def arms(self):
        return [Arm(a) for a in self.raw["arms"]]

    def positive_spec(self):
        return envs.DomainSpec.from_dict(self.raw["problem"]["positive"])

    def mixture(self):
        p = self.raw["problem"]
        if p["negatives"] is None:
            if self.shift not in envs.SHIFTS:
                raise ConfigError(f"no negatives given and {self.shift!r} is not a preset shift")
            return envs.SHIFTS[self.shift]()
        negs = tuple(envs.DomainSpec.from_dict(n) for n in p["negatives"])
        eta = p["eta"] if p["eta"] is not None else [1.0 / len(negs)] * len(negs)
        return envs.MixtureSpec(negs, tuple(eta))

    def problem_block(self):
        p = dict(self.raw["problem"])
        p["positive"] = self.positive_spec().to_dict()
        p["mixture"] = self.mixture().to_dict()
        p.pop("negatives"); p.pop("eta")
        return p

    def classifier_config(self):
        c = self.raw["classifier"]
        return pu_learn.ClassifierConfig(input_mode=c["input_mode"], hidden=tuple(c["hidden"]), lr=c["lr"],
                                         batch_size=c["batch_size"], epochs_warmup=c["epochs_warmup"],
                                         epochs_main=c["epochs_main"])

    def rl_config(self):
        r = self.raw["rl"]
        kind = offline_rl.AgentKind(r["agent_kind"])
        cls = offline_rl.Td3BcConfig if kind is offline_rl.AgentKind.TD3BC else offline_rl.IqlConfig
        return cls(hidden=tuple(r["hidden"]), batch_size=r["batch_size"])

    def dara_config(self):
        d = self.raw["baselines"]["dara"]
        return baselines.DaraConfig(eta=d["eta"], steps=d["steps"], batch_size=d["batch_size"],
                                    hidden=tuple(d["hidden"]), input_noise=d["input_noise"])

    def igdf_config(self):
        d = self.raw["baselines"]["igdf"]
        return baselines.IgdfConfig(xi=d["xi"], rep_dim=d["rep_dim"], encoder_steps=d["encoder_steps"],
                                    batch_size=d["batch_size"], hidden=tuple(d["hidden"]))

    def validate(self):
        try:
            self.positive_spec()
            self.mixture()
            for a in self.raw["arms"]:
                Arm(a)
            self.classifier_config()
            self.rl_config()
            qs = self.raw["problem"]["qualities"]
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if len(qs) != 2:
            raise ConfigError("qualities must be [positive, negative]")
        p = self.raw["problem"]
        if not 0 < p["labeled_ratio"] < p["alpha_p"] <= 1:
            raise ConfigError("need 0 < labeled_ratio < alpha_p <= 1")
        for block, key in (("rl", "seeds"), ("classifier", "seeds")):
            seeds = self.raw[block][key]
            if not seeds or len(set(seeds)) != len(seeds):
                raise ConfigError(f"{block}.{key} must be a nonempty list of distinct seeds")
        if len(set(self.raw["arms"])) != len(self.raw["arms"]):
            raise ConfigError("arms must be distinct")


def load_config(path, overrides=None):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    for key, value in (overrides or {}).items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(raw)


def digest(*blocks):
    payload = json.dumps(blocks, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- stages

class Runner:
    """Executes one config, tracking which artifacts were (re)computed."""

    def __init__(self, config):
        self.config = config
        self.out = config.output_dir
        self.recomputed = []
        self.pkey = digest(config.problem_block())

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    # problem + anchors
    def problem(self):
        pos_p = self.path("data", f"positive-{self.pkey}.puorl")
        unl_p = self.path("data", f"unlabeled-{self.pkey}.puorl")
        meta_p = self.path("data", f"problem-{self.pkey}.json")
        if all(os.path.exists(p) for p in (pos_p, unl_p, meta_p)):
            meta = _read_json(meta_p)
            return PuorlProblem(load(pos_p), load(unl_p), meta["labeled_ratio"], meta["alpha_p_true"])
        prob = generate_problem(self.config)
        save(prob.positive, pos_p)
        save(prob.unlabeled, unl_p)
        _write_json(meta_p, {"labeled_ratio": prob.labeled_ratio, "alpha_p_true": prob.alpha_p_true,
                             "n_p": prob.n_p, "n_u": prob.n_u})
        self.recomputed.append("problem")
        return prob

    def anchors(self):
        a = self.config.raw["anchors"]
        key = digest(self.config.positive_spec().to_dict(), a)
        path = self.path("anchors", f"anchors-{key}.json")
        if os.path.exists(path):
            d = _read_json(path)
            return d["random_return"], d["expert_return"]
        rand, expert = envs.reference_returns(self.config.positive_spec(), a["episodes"], nn_core.Rng(a["seed"]))
        _write_json(path, {"random_return": rand, "expert_return": expert})
        self.recomputed.append("anchors")
        return rand, expert

    def classifier(self, problem, seed):
        c = self.config.raw["classifier"]
        key = digest(self.config.problem_block(), {k: v for k, v in c.items() if k != "seeds"}, seed)
        ckpt = self.path("classifier", f"clf-seed{seed}-{key}.bin")
        report = self.path("classifier", f"clf-seed{seed}-{key}.json")
        if os.path.exists(ckpt) and os.path.exists(report):
            return pu_learn.load_classifier(ckpt), _read_json(report), report
        state = pu_learn.train_classifier(problem, self.config.classifier_config(), nn_core.Rng(seed).child("classifier"))
        stats = pu_learn.evaluate_classifier(state, problem, c["threshold"])
        kept = filtering.kept_indices(state, problem.unlabeled, c["threshold"])
        stats["filter"] = json.loads(filtering.grade(problem.unlabeled, kept, c["threshold"]).to_json())
        stats["seed"] = seed
        pu_learn.save_classifier(state, ckpt)
        _write_json(report, stats)
        self.recomputed.append(f"classifier/seed{seed}")
        # reload so cached and fresh runs see identical float32 parameters
        return pu_learn.load_classifier(ckpt), stats, report

    def arm_key(self, arm, seed):
        deps = [self.config.problem_block(), self.config.raw["rl"], self.config.raw["anchors"], arm.value, seed]
        if arm is Arm.OURS:
            c = self.config.raw["classifier"]
            deps.append({k: v for k, v in c.items() if k != "seeds"})
            deps.append(c["seeds"][0])
        elif arm is Arm.DARA:
            deps.append(self.config.raw["baselines"]["dara"])
        elif arm is Arm.IGDF:
            deps.append(self.config.raw["baselines"]["igdf"])
        return digest(*deps)

    def arm_paths(self, arm, seed):
        key = self.arm_key(arm, seed)
        stem = self.path("arms", arm.value, f"seed{seed}-{key}")
        return stem + ".json", stem + ".curves.csv", stem + ".agent.bin"

    def training_data(self, arm, problem, classifier):
        """Returns ``(dataset, batch_provider)`` for an arm; learners never read hidden labels."""
        if arm in (Arm.OLP, Arm.SHARING_ALL, Arm.ORACLE):
            return baselines.select_dataset(arm, problem), None
        if arm is Arm.OURS:
            thr = self.config.raw["classifier"]["threshold"]
            kept = filtering.kept_indices(classifier, problem.unlabeled, thr)
            return filtering.augment(problem, problem.unlabeled.subset(kept)), None
        rng = nn_core.Rng(self.config.raw["problem"]["seed"]).child("baseline", arm.value)
        if arm is Arm.DARA:
            return baselines.dara_augment(problem, rng, self.config.dara_config()), None
        enc = baselines.igdf_train_encoders(problem, rng, self.config.igdf_config())
        provider = baselines.igdf_batch_provider(enc, problem, self.config.rl_config().batch_size)
        return concat(problem.positive, problem.unlabeled), provider

    def run_arm(self, arm, seed, problem, anchors, classifier, cache):
        res_p, curve_p, agent_p = self.arm_paths(arm, seed)
        if os.path.exists(res_p):
            return _read_json(res_p)
        r = self.config.raw["rl"]
        base = {"arm": arm.value, "seed": seed, "shift": self.config.shift, "quality": self.config.quality}
        try:
            if arm not in cache:
                cache[arm] = self.training_data(arm, problem, classifier)
            dataset, provider = cache[arm]
            agent, curves = offline_rl.train(r["agent_kind"], dataset, r["steps"], nn_core.Rng(seed).child("rl", arm.value),
                                             self.config.rl_config(), batch_provider=provider,
                                             log_interval=max(1, r["steps"] // 50))
            ev = offline_rl.evaluate(agent, self.config.positive_spec(), r["eval_episodes"],
                                     nn_core.Rng(seed).child("eval"), anchors)
        except PuorlError as exc:
            log.warning("arm %s seed %s failed: %s", arm.value, seed, exc)
            result = {**base, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        else:
            atomic_write(curve_p, curves.to_csv().encode())
            atomic_write(agent_p, offline_rl.agent_to_bytes(agent))
            result = {**base, "status": "ok", "score": ev.mean, "returns": ev.returns,
                      "normalized_scores": ev.normalized_scores, "dataset_count": dataset.count,
                      "curves": os.path.relpath(curve_p, self.out)}
        _write_json(res_p, result)
        self.recomputed.append(f"{arm.value}/seed{seed}")
        return result


def run(config):
    """Run every arm x seed of ``config``; returns the rendered ResultTable."""
    from .report import summarize

    runner = Runner(config)
    os.makedirs(runner.out, exist_ok=True)
    problem = runner.problem()
    anchors = runner.anchors()
    c = config.raw["classifier"]
    clf_reports, classifier = [], None
    if Arm.OURS in config.arms:
        for i, seed in enumerate(c["seeds"]):
            state, _, report_path = runner.classifier(problem, seed)
            clf_reports.append(os.path.relpath(report_path, runner.out))
            if i == 0:
                classifier = state  # one classifier shared by every RL seed
    results = {}
    cache = {}
    for arm in config.arms:
        results[arm.value] = {}
        for seed in config.raw["rl"]["seeds"]:
            runner.run_arm(arm, seed, problem, anchors, classifier, cache)
            results[arm.value][str(seed)] = os.path.relpath(runner.arm_paths(arm, seed)[0], runner.out)
    manifest = {
        "version": CONFIG_VERSION,
        "config_digest": digest(config.raw),
        "shift": config.shift,
        "quality": config.quality,
        "arms": [a.value for a in config.arms],
        "rl_seeds": list(config.raw["rl"]["seeds"]),
        "results": results,
        "classifiers": clf_reports,
    }
    _write_json(os.path.join(runner.out, f"manifest-{digest(config.raw)}.json"), manifest)
    _write_json(os.path.join(runner.out, f"config-{digest(config.raw)}.json"), config.raw)
    table = summarize(runner.out)
    table.recomputed = runner.recomputed
    return table


# ------------------------------------------------------ standalone problem dirs

def save_problem(problem, directory):
    os.makedirs(directory, exist_ok=True)
    save(problem.positive, os.path.join(directory, "positive.puorl"))
    save(problem.unlabeled, os.path.join(directory, "unlabeled.puorl"))
    _write_json(os.path.join(directory, "problem.json"),
                {"labeled_ratio": problem.labeled_ratio, "alpha_p_true": problem.alpha_p_true,
                 "n_p": problem.n_p, "n_u": problem.n_u})


def load_problem(directory):
    meta = _read_json(os.path.join(directory, "problem.json"))
    return PuorlProblem(load(os.path.join(directory, "positive.puorl")),
                        load(os.path.join(directory, "unlabeled.puorl")),
                        meta["labeled_ratio"], meta["alpha_p_true"])


def generate_problem(config):
    p = config.raw["problem"]
    return build_problem(config.positive_spec(), config.mixture(), tuple(p["qualities"]), p["total_count"],
                         p["alpha_p"], p["labeled_ratio"], nn_core.Rng(p["seed"]))
