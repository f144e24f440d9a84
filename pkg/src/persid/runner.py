"""Closed-loop experiment emulation and the end-to-end reconstruction pipeline.

The pipeline follows the loop: build domain, split policies, collect
training data from the virtual participant, fit, calibrate the tolerance,
test equivalence on held-out policies, then optional informativeness and
consistency probes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import discrepancy as disc
from . import iohmm, lgss, systems
from .domain import (
    CONTINUOUS,
    DISCRETE,
    ExperimentalDomain,
    OutputSpace,
    PerturbationSequence,
    PerturbationSplit,
    TrajectoryRecord,
    group_dataset,
    make_split,
    validate_domain,
)
from .equivalence import calibrate_delta, equivalence_test, intrinsic_error
from .errors import ConfigError, PersidError, PipelineError, SplitViolation
from .informativeness import discriminatory_power, greedy_adaptive_design, select_optimal_family
from .policies import (
    PerturbationPolicy,
    adaptive_step,
    generate_open_loop,
    policy_from_dict,
    validate_policy,
)
from .reconstruction import LossConfig, ModelClass, consistency_probe, empirical_loss, fit
from .seeding import derive_seed


# --------------------------------------------------------------- environment


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """Environment map between policy output and the stimulus the participant sees.

    ``passthrough`` forwards ``u_t`` unchanged. ``linear`` keeps a state
    ``s_{t+1} = F s_t + G u_t`` (``s_0 = 0``) and presents ``H s_t``.
    """

    kind: str = "passthrough"
    F: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("passthrough", "linear"):
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.kind == "linear":
            if self.F is None or self.G is None or self.H is None:
                raise ConfigError("linear environment needs F, G and H")
            for k in ("F", "G", "H"):
                object.__setattr__(self, k, np.atleast_2d(np.asarray(getattr(self, k), dtype=float)))

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "EnvironmentSpec":
        if not d:
            return cls()
        return cls(kind=d.get("kind", "passthrough"), F=d.get("F"), G=d.get("G"), H=d.get("H"))

    def to_dict(self) -> dict:
        if self.kind == "passthrough":
            return {"kind": "passthrough"}
        return {"kind": "linear", "F": self.F.tolist(), "G": self.G.tolist(), "H": self.H.tolist()}


def _stepper(truth, T: int, seed: int):
    kind = systems.model_kind(truth)
    if kind == "lgss":
        return lgss.Stepper(truth, T, 1, seed)
    if kind == "iohmm":
        return iohmm.Stepper(truth, T, 1, seed)
    raise TypeError("closed-loop runs need a parametric virtual participant")


def run_closed_loop(truth, environment: EnvironmentSpec, policy: PerturbationPolicy, T: int,
                    seed: int, domain: ExperimentalDomain = None, *,
                    policy_seed: Optional[int] = None, truth_seed: Optional[int] = None,
                    truth_tag: Optional[str] = None) -> TrajectoryRecord:
    """One coupled run of policy, environment and virtual participant.

    Recorded inputs are the stimuli actually applied. Sub-seeds default to
    ``derive_seed(seed, "policy")`` and ``derive_seed(seed, "truth")``.
    """
    policy_seed = derive_seed(seed, "policy") if policy_seed is None else policy_seed
    truth_seed = derive_seed(seed, "truth") if truth_seed is None else truth_seed
    discrete = isinstance(truth, iohmm.IoHmmParams)
    m = domain.input_dim if domain is not None else (1 if discrete else truth.m)
    plan = None
    if not policy.is_adaptive:
        plan = generate_open_loop(policy, T, m, policy_seed, domain).values
    st = _stepper(truth, T, truth_seed)
    stim = np.empty((T, m))
    Y = np.empty(T + 1, dtype=np.int64) if discrete else np.empty((T + 1, truth.p))
    s = np.zeros(environment.F.shape[0]) if environment.kind == "linear" else None
    x = st.initial()
    for t in range(T + 1):
        Y[t] = st.emit(x, t)[0]
        if t == T:
            break
        u = plan[t] if plan is not None else adaptive_step(policy, t, Y[: t + 1], domain)
        if environment.kind == "linear":
            v = environment.H @ s
            s = environment.F @ s + environment.G @ u
        else:
            v = u
        stim[t] = domain.clamp(v) if domain is not None else v
        if discrete:
            x = st.advance(x, int(np.rint(stim[t, 0])), t)
        else:
            x = st.advance(x, stim[t][None, :], t)
    seq = PerturbationSequence(stim, policy_id=policy.id, seed=int(policy_seed))
    return TrajectoryRecord(inputs=seq, outputs=Y, truth_tag=truth_tag, seed=int(truth_seed))


def collect_dataset(truth, environment: EnvironmentSpec, policies: Sequence[PerturbationPolicy],
                    reps_per_policy: int, T: int, seed: int, domain: ExperimentalDomain = None,
                    threads: int = 1, truth_tag: Optional[str] = None):
    """``len(policies) * reps_per_policy`` records in (policy, rep) order.

    Open-loop policies use one sequence seed per policy so replicates share
    inputs; participant noise gets one seed per record.
    """
    if reps_per_policy < 1:
        raise ValueError("reps_per_policy must be >= 1")
    jobs = [(p, r) for p in policies for r in range(reps_per_policy)]

    def run(job):
        p, r = job
        return run_closed_loop(
            truth, environment, p, T, seed, domain,
            policy_seed=derive_seed(seed, "policy:" + p.id),
            truth_seed=derive_seed(seed, f"truth:{p.id}", r),
            truth_tag=truth_tag,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            recs = list(ex.map(run, jobs))
    else:
        recs = [run(j) for j in jobs]
    return group_dataset(recs, domain)


# ------------------------------------------------------------------ scenario


def _load_system(d: dict):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("system needs a 'kind'")
    try:
        if d["kind"] == "lgss":
            return lgss.LgssParams.from_dict(d["params"])
        if d["kind"] == "iohmm":
            return iohmm.IoHmmParams.from_dict(d["params"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad {d['kind']} parameters: {exc}") from exc
    raise ConfigError(f"unknown system kind {d['kind']!r}")


def _system_to_dict(system) -> dict:
    return {"kind": systems.model_kind(system), "params": system.to_dict()}


@dataclass
class Scenario:
    name: str
    seed: int
    domain: ExperimentalDomain
    truth: object
    model_class: ModelClass
    policies: dict  # id -> PerturbationPolicy, in declaration order
    split: dict
    loss: LossConfig
    collection: dict
    fit: dict
    validation: dict
    informativeness: Optional[dict]
    consistency: Optional[dict]
    raw: dict

    def policy_list(self, ids) -> list:
        return [self.policies[i] for i in ids]


def load_scenario(config: dict, seed_override: Optional[int] = None) -> Scenario:
    """Parse and check a scenario document; structural problems raise ConfigError."""
    if not isinstance(config, dict):
        raise ConfigError("scenario must be a JSON object")
    cfg = json.loads(json.dumps(config))
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    for key in ("domain", "truth", "model_class", "policies"):
        if key not in cfg:
            raise ConfigError(f"scenario is missing section {key!r}")
    pols = [policy_from_dict(p) for p in cfg["policies"]]
    ids = [p.id for p in pols]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate policy ids")
    dd = cfg["domain"]
    try:
        os_d = dd.get("output_space", {"kind": CONTINUOUS})
        domain = ExperimentalDomain(
            input_dim=int(dd["input_dim"]),
            output_dim=int(dd["output_dim"]),
            input_bounds=[tuple(b) for b in dd["input_bounds"]],
            horizon=int(dd["horizon"]),
            policy_family_ids=dd.get("policy_family_ids", ids),
            output_space=OutputSpace(os_d.get("kind", CONTINUOUS), os_d.get("size")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad domain section: {exc}") from exc
    problems = validate_domain(domain)
    unknown = set(domain.policy_family_ids) - set(ids)
    if unknown:
        problems.append(f"domain lists undeclared policies {sorted(unknown)}")
    for p in pols:
        problems += [f"policy {p.id}: {msg}" for msg in validate_policy(p, domain)]
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        mc = ModelClass.from_dict(cfg["model_class"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model_class section: {exc}") from exc
    try:
        loss = LossConfig.from_dict(cfg.get("loss", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Scenario(
        name=str(cfg.get("name", "scenario")),
        seed=int(cfg.get("seed", 0)),
        domain=domain,
        truth=_load_system(cfg["truth"]),
        model_class=mc,
        policies={p.id: p for p in pols},
        split=cfg.get("split", {"test_fraction": 0.25}),
        loss=loss,
        collection=cfg.get("collection", {}),
        fit=cfg.get("fit", {}),
        validation=cfg.get("validation", {}),
        informativeness=cfg.get("informativeness"),
        consistency=cfg.get("consistency"),
        raw=cfg,
    )


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ pipeline


@dataclass
class PipelineReport:
    sections: dict
    provenance: dict
    timings: dict = field(default_factory=dict)

    @property
    def equivalence(self) -> Optional[dict]:
        return self.sections.get("equivalence_report")

    def to_dict(self, include_timings: bool = False) -> dict:
        out = dict(self.sections)
        out["provenance"] = self.provenance
        if include_timings:
            out["timings"] = self.timings
        return out


class StageRunner:
    def __init__(self):
        self.timings = {}

    def run(self, stage: str, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except PipelineError:
            raise
        except (PersidError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise PipelineError(stage, exc) from exc
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0


def _fit_loss(loss: LossConfig) -> LossConfig:
    """Optimization objective: a distributional loss is evaluated, the likelihood is fitted."""
    return LossConfig(lam=loss.lam, regularizer=loss.regularizer)


def resolve_split(sc: Scenario, seed: int) -> PerturbationSplit:
    sp = sc.split
    if "train" in sp or "test" in sp:
        split = PerturbationSplit(sp.get("train", []), sp.get("test", []))
    else:
        split = make_split(sc.domain, float(sp.get("test_fraction", 0.25)), int(sp.get("seed", seed)))
    shared = split.overlap()
    if shared:
        raise SplitViolation(f"train and test policies overlap: {sorted(shared)}")
    declared = set(sc.domain.policy_family_ids)
    stray = (set(split.train_policy_ids) | set(split.test_policy_ids)) - declared
    if stray:
        raise ValueError(f"split names policies outside the domain: {sorted(stray)}")
    if not split.train_policy_ids or not split.test_policy_ids:
        raise ValueError("split needs at least one train and one test policy")
    return split


def _check_discipline(train_data, test_ids):
    leaked = {r.inputs.policy_id for r in train_data.records} & set(test_ids)
    if leaked:
        raise SplitViolation(f"training data contains test-policy records: {sorted(leaked)}")


def run_pipeline(config: dict, seed_override: Optional[int] = None, *, threads: int = 1,
                 stages: Sequence[str] = ("informativeness", "consistency")) -> PipelineReport:
    """Run the full reconstruct-and-validate loop described by ``config``.

    ``stages`` selects which optional stages run when configured.
    """
    st = StageRunner()
    sc = st.run("config", load_scenario, config, seed_override)
    master = sc.seed
    seeds = {
        "master": master,
        "split": int(sc.split.get("seed", derive_seed(master, "split"))),
        "collect": derive_seed(master, "collect"),
        "fit": derive_seed(master, "fit"),
        "sequences": derive_seed(master, "test_sequences"),
        "calibration": derive_seed(master, "calibration"),
        "equivalence": derive_seed(master, "equivalence"),
    }
    split = st.run("split", resolve_split, sc, seeds["split"])
    train_pols = sc.policy_list(split.train_policy_ids)
    test_pols = sc.policy_list(split.test_policy_ids)
    domain = sc.domain

    env = st.run("collect", EnvironmentSpec.from_dict, sc.collection.get("environment"))
    reps_pp = int(sc.collection.get("reps_per_policy", 20))
    train = st.run("collect", collect_dataset, sc.truth, env, train_pols, reps_pp, domain.horizon,
                   seeds["collect"], domain, threads, "truth")
    st.run("collect", _check_discipline, train, split.test_policy_ids)

    val = sc.validation
    mode = val.get("mode", systems.SAMPLED)
    reps = int(val.get("reps", 100))
    norm = val.get("normalization", "per_timestep")
    kind = val.get("discrepancy", disc.ENERGY)
    fit_cfg = sc.fit
    n_starts = int(fit_cfg.get("n_starts", 1))
    inits = None
    if fit_cfg.get("init") is not None:
        inits = [st.run("fit", _load_system, fit_cfg["init"])] * n_starts

    def do_fit():
        return intrinsic_error(
            sc.model_class, sc.truth, test_pols, domain, n_starts, seeds["fit"],
            data=train, inits=inits, mode=mode, reps=reps, sequence_seed=seeds["sequences"],
            normalization=norm, sample_kind=kind, score_seed=seeds["equivalence"],
            max_iter=int(fit_cfg.get("max_iter", 200)), tol=float(fit_cfg.get("tol", 1e-6)),
            fixed_fields=tuple(fit_cfg.get("fixed_fields", ())), loss_config=_fit_loss(sc.loss),
        )

    ie = st.run("fit", do_fit)
    # model selection uses training likelihood only
    best_fit = min(range(len(ie.fit_reports)), key=lambda i: ie.fit_reports[i].final_loss)
    fit_report = ie.fit_reports[best_fit]

    def do_delta():
        if val.get("delta") is not None:
            return float(val["delta"]), "configured"
        return calibrate_delta(
            sc.truth, test_pols, domain, reps=reps, n_calibration=int(val.get("n_calibration", 200)),
            quantile=float(val.get("quantile", 0.95)), seed=seeds["calibration"], mode=mode,
            sequence_seed=seeds["sequences"], sample_kind=kind,
        ), "calibrated"

    fit_section = dict(fit_report.to_dict(), start=best_fit)
    if sc.loss.loss_mode != "nll":
        fit_section["distributional_loss"] = st.run(
            "fit", empirical_loss, fit_report.theta_hat, train, sc.loss, derive_seed(master, "loss"))

    delta, delta_source = st.run("calibrate", do_delta)
    eq = st.run("equivalence", equivalence_test, sc.truth, fit_report.theta_hat, test_pols, domain,
                delta, reps, seeds["equivalence"], mode=mode,
                train_policy_ids=split.train_policy_ids, sequence_seed=seeds["sequences"],
                normalization=norm, sample_kind=kind)

    sections = {
        "scenario": sc.name,
        "domain": {
            "input_dim": domain.input_dim, "output_dim": domain.output_dim,
            "input_bounds": [list(b) for b in domain.input_bounds], "horizon": domain.horizon,
            "policy_family_ids": list(domain.policy_family_ids),
        },
        "split": {"train": list(split.train_policy_ids), "test": list(split.test_policy_ids)},
        "dataset": {
            "n_records": len(train), "n_groups": len(train.groups),
            "policy_ids": train.policy_ids(), "reps_per_policy": reps_pp,
        },
        "fit_report": fit_section,
        "delta": {"value": delta, "source": delta_source},
        "equivalence_report": eq.to_dict(),
        "intrinsic": ie.to_dict(),
    }

    inf_cfg = sc.informativeness
    if inf_cfg and "informativeness" in stages:
        seeds["informativeness"] = derive_seed(master, "informativeness")
        sections["discrimination_report"] = st.run(
            "informativeness", run_informativeness, sc, inf_cfg, seeds["informativeness"],
            delta if mode == systems.SAMPLED else None)
    cons_cfg = sc.consistency
    if cons_cfg and "consistency" in stages:
        seeds["consistency"] = derive_seed(master, "consistency")
        rows = st.run(
            "consistency", consistency_probe, sc.model_class, sc.truth, train_pols,
            [int(n) for n in cons_cfg["Ns"]], seeds["consistency"], domain,
            probe_policies=test_pols, max_iter=int(cons_cfg.get("max_iter", 200)),
            normalization=norm)
        sections["consistency_table"] = [r.to_dict() for r in rows]

    provenance = {
        "config_digest": config_digest(sc.raw),
        "seed_override": seed_override,
        "seeds": seeds,
        "equivalence_seeds": eq.seeds,
        "train_record_seeds": [int(r.seed) for r in train.records],
        "train_policy_ids_seen": train.policy_ids(),
    }
    return PipelineReport(sections=sections, provenance=provenance, timings=st.timings)


def run_informativeness(sc: Scenario, cfg: dict, seed: int, tau: Optional[float] = None) -> dict:
    """Discriminatory power, family selection and greedy design for a scenario."""
    models = [_load_system(m) for m in cfg.get("models", [])] or None
    if models is None:
        raise ValueError("informativeness needs a 'models' list")
    mode = cfg.get("mode", systems.AUTO)
    reps = int(cfg.get("reps", 100))
    families = [[sc.policies[i] for i in fam] for fam in cfg.get("families", [list(sc.policies)])]
    idx, rep = select_optimal_family(models, families, sc.domain, seed, mode=mode, reps=reps)
    out = {
        "families": [[p.id for p in fam] for fam in families],
        "selected_family": idx,
        "report": rep.to_dict(),
    }
    pool_ids = cfg.get("pool", list(sc.policies))
    pool = [sc.policies[i] for i in pool_ids]
    if not any(p.is_adaptive for p in pool):
        budget = int(cfg.get("budget", min(2, len(pool))))
        t = float(cfg["tau"]) if cfg.get("tau") is not None else (tau or 0.0)
        design = greedy_adaptive_design(models, pool, budget, sc.domain, seed, tau=t, mode=mode, reps=reps)
        out["design"] = dict(design.to_dict(), tau=t)
    return out


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("PERSID_THREADS", default)))
    except ValueError:
        return default
