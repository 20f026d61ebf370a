"""End-to-end runs: data files, checkpoints, traces and metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vbks.belief import BeliefConfig, KernelBeliefState, init_belief, optimize_belief, ranking
from vbks.estimator import resolve_kernels, train_states
from vbks.gp_core import Dataset, choose_inducing
from vbks.kernels import parse_kernel, read_kernel_file
from vbks.local_elbo import LocalConfig, SgprState
from vbks.prediction import predict_bma, predict_kernel, rmse

log = logging.getLogger(__name__)

FORMAT = "vbks-checkpoint/1"


@dataclass
class RunConfig:
    data: str = ""
    test_data: str | None = None
    output_dir: str = "run"
    kernels_file: str | None = None
    kernels: str | None = None  # comma separated expressions
    grammar_level: int | None = None
    n_inducing: int = 16
    batch_size: int = 32
    local_steps: int = 2000
    belief_steps: int = 2000
    learning_rate: float = 1e-2
    belief_learning_rate: float = 0.05
    n_eta_lik: int = 1
    n_eta_ce: int = 4
    n_posterior_samples: int = 2000
    n_theta_draws: int = 100
    theta_mode: str = "full"
    prior_mean: str | None = None  # comma separated, one per kernel
    seed: int = 0
    workers: int = 1
    normalize: bool = True
    trace_fraction: float = 0.0128
    observation: bool = False
    resume: bool = False

    def __post_init__(self):
        for name in ("n_inducing", "batch_size", "local_steps", "n_eta_lik", "n_eta_ce",
                     "n_posterior_samples", "n_theta_draws", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.belief_steps < 0:
            raise ValueError("belief_steps must be non-negative")
        if self.theta_mode not in ("full", "point"):
            raise ValueError("theta_mode must be 'full' or 'point'")
        if not 0 < self.trace_fraction <= 1:
            raise ValueError("trace_fraction must be in (0, 1]")
        sources = [self.kernels_file, self.kernels, self.grammar_level]
        if sum(s is not None for s in sources) > 1:
            raise ValueError("give one of kernels_file, kernels, grammar_level")

    def kernel_set(self):
        if self.kernels_file is not None:
            return resolve_kernels(read_kernel_file(self.kernels_file))
        if self.kernels is not None:
            return resolve_kernels([k for k in self.kernels.split(",") if k.strip()])
        return resolve_kernels(grammar_level=1 if self.grammar_level is None else self.grammar_level)

    @property
    def local_config(self) -> LocalConfig:
        return LocalConfig(
            steps=self.local_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            n_eta_lik=self.n_eta_lik,
            n_eta_ce=self.n_eta_ce,
            chunk=max(1, round(self.local_steps * self.trace_fraction)),
        )

    @property
    def belief_config(self) -> BeliefConfig:
        return BeliefConfig(steps=self.belief_steps, learning_rate=self.belief_learning_rate)


# ---------------------------------------------------------------------------
# config files


def _coerce(field: dataclasses.Field, text: str):
    kind = str(field.type)
    if text.lower() in ("none", "null", ""):
        return None
    if "bool" in kind:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {text!r}")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(fields[key], value)
    return out


# ---------------------------------------------------------------------------
# data files


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def ingest_csv(path, n_inputs=None, normalize=False) -> Dataset:
    """Read inputs then one output column. A header row of non-numbers is skipped.

    With ``normalize`` every column is standardized and the statistics kept on
    the returned Dataset.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and not any(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    for n, r in enumerate(rows, 1):
        if len(r) != width:
            raise ValueError(f"{path}: row {n} has {len(r)} cells, expected {width}")
    try:
        A = np.array([[float(c) for c in r] for r in rows])
    except ValueError as e:
        raise ValueError(f"{path}: non-numeric cell ({e})") from None
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{path}: missing or non-finite values")
    d = width - 1 if n_inputs is None else n_inputs
    if d < 1 or d + 1 != width:
        raise ValueError(f"{path}: expected {d} input columns and 1 output column")
    X, y = A[:, :d], A[:, d]
    if normalize:
        return Dataset.standardized(X, y)
    return Dataset(X, y)


def write_csv(path, X, y=None, extra=None):
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    cols = {f"x{j}": X[:, j] for j in range(X.shape[1])}
    if y is not None:
        cols["y"] = np.asarray(y, dtype=float)
    cols.update(extra or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*cols.values()):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# checkpoints


def file_tag(name: str) -> str:
    return name.replace("*", "x").replace("+", "p").replace("(", "_").replace(")", "_")


def _arr(a):
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unarr(d, dtype=float):
    return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])


def state_to_json(state: SgprState, trace_rows=None, snapshots=None) -> dict:
    return {
        "format": FORMAT,
        "kind": "kernel",
        "kernel": state.expr.canonical_name,
        "inducing": _arr(state.inducing),
        "point_theta": state.point_theta,
        "params": {k: _arr(v) for k, v in state.params.items()},
        "adam_m": {k: _arr(v) for k, v in state.adam_m.items()},
        "adam_v": {k: _arr(v) for k, v in state.adam_v.items()},
        "step": state.step,
        "elbo_star": state.elbo_star,
        "key": [int(k) for k in np.asarray(state.key)],
        "snapshots": snapshots or [],
    }


def state_from_json(doc) -> SgprState:
    if doc.get("format") != FORMAT or doc.get("kind") != "kernel":
        raise ValueError("not a kernel checkpoint of a supported format")
    return SgprState(
        expr=parse_kernel(doc["kernel"]),
        inducing=_unarr(doc["inducing"]),
        params={k: _unarr(v) for k, v in doc["params"].items()},
        point_theta=doc["point_theta"],
        adam_m={k: _unarr(v) for k, v in doc["adam_m"].items()},
        adam_v={k: _unarr(v) for k, v in doc["adam_v"].items()},
        step=doc["step"],
        elbo_star=doc["elbo_star"],
        key=np.asarray(doc["key"], dtype=np.uint32),
    )


def belief_to_json(belief: KernelBeliefState, data: Dataset) -> dict:
    return {
        "format": FORMAT,
        "kind": "belief",
        "names": list(belief.names),
        "l_star": belief.l_star.tolist(),
        "m_g": belief.m_g.tolist(),
        "c_g": _arr(belief.c_g),
        "prior_mean": belief.prior_mean.tolist(),
        "prior_chol": _arr(belief.prior_chol),
        "posterior": None if belief.posterior is None else belief.posterior.tolist(),
        "n_samples": belief.n_samples,
        "step": belief.step,
        "seed": belief.seed,
        "y_mean": data.y_mean,
        "y_scale": data.y_scale,
        "x_mean": None if data.x_mean is None else np.asarray(data.x_mean).tolist(),
        "x_scale": None if data.x_scale is None else np.asarray(data.x_scale).tolist(),
    }


def belief_from_json(doc) -> KernelBeliefState:
    if doc.get("format") != FORMAT or doc.get("kind") != "belief":
        raise ValueError("not a belief checkpoint of a supported format")
    return KernelBeliefState(
        names=tuple(doc["names"]),
        l_star=np.asarray(doc["l_star"]),
        m_g=np.asarray(doc["m_g"]),
        c_g=_unarr(doc["c_g"]),
        prior_mean=np.asarray(doc["prior_mean"]),
        prior_chol=_unarr(doc["prior_chol"]),
        posterior=None if doc["posterior"] is None else np.asarray(doc["posterior"]),
        n_samples=doc["n_samples"],
        step=doc["step"],
        seed=doc["seed"],
    )


def _dump(path, doc):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_run(output_dir):
    """Kernel states, belief and output scaling saved by ``run_vbks``."""
    out = Path(output_dir)
    doc = json.loads((out / "checkpoint_belief.json").read_text())
    belief = belief_from_json(doc)
    states = []
    for name in belief.names:
        kdoc = json.loads((out / f"checkpoint_{file_tag(name)}.json").read_text())
        states.append(state_from_json(kdoc))
    scaling = Dataset(
        np.zeros((1, states[0].inducing.shape[1])),
        np.zeros(1),
        x_mean=None if doc["x_mean"] is None else np.asarray(doc["x_mean"]),
        x_scale=None if doc["x_scale"] is None else np.asarray(doc["x_scale"]),
        y_mean=doc["y_mean"],
        y_scale=doc["y_scale"],
    )
    return states, belief, scaling


# ---------------------------------------------------------------------------
# runs


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "elbo", "smoothed_elbo", "grad_norm"])
        for r in rows:
            w.writerow([int(r[0]), repr(float(r[1])), repr(float(r[2])), repr(float(r[3]))])


def _read_trace(path, upto):
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [[int(r[0])] + [float(c) for c in r[1:]] for r in rows if int(r[0]) <= upto]


def predict_run(states, belief, scaling, X, n_theta_draws=100, seed=0, observation=False):
    """BMA and single-top-kernel predictions in original output units."""
    Xs = scaling.transform_inputs(X)
    mean, var = predict_bma(states, belief.posterior, Xs, n_theta_draws, seed, observation)
    top = ranking(belief)[0]
    m1, v1 = predict_kernel(states[top], Xs, n_theta_draws, seed, observation)
    mean, var = scaling.restore_outputs(mean, var)
    m1, v1 = scaling.restore_outputs(m1, v1)
    return {"mean": mean, "variance": var, "single_mean": m1, "single_variance": v1}


def run_vbks(config: RunConfig) -> dict:
    """Train every kernel, fit the kernel belief, and write all run artifacts.

    Kernels whose training aborts are excluded and reported in ``metrics.json``.
    With ``config.resume`` existing kernel checkpoints are continued.
    """
    t0 = time.perf_counter()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = ingest_csv(config.data)
    if config.normalize:
        data = Dataset.standardized(data.X, data.y, inputs=False)
    if config.batch_size > len(data):
        raise ValueError("batch_size exceeds the number of training points")
    exprs = config.kernel_set()
    names = [e.canonical_name for e in exprs]
    U = choose_inducing(data.X, config.n_inducing, config.seed)
    lcfg = config.local_config

    traces = {i: [] for i in range(len(exprs))}
    snaps = {i: [] for i in range(len(exprs))}
    states = None
    if config.resume:
        states = []
        for i, name in enumerate(names):
            path = out / f"checkpoint_{file_tag(name)}.json"
            if not path.exists():
                states.append(None)
                continue
            doc = json.loads(path.read_text())
            st = state_from_json(doc)
            states.append(st)
            snaps[i] = [tuple(s) for s in doc["snapshots"]]
            traces[i] = _read_trace(out / f"elbo_trace_{file_tag(name)}.csv", st.step)

    def on_chunk(i, state, rows):
        traces[i].extend(np.asarray(rows).tolist())
        snaps[i].append((state.step, state.elbo_star))
        _dump(out / f"checkpoint_{file_tag(names[i])}.json", state_to_json(state, snapshots=snaps[i]))
        _write_trace(out / f"elbo_trace_{file_tag(names[i])}.csv", traces[i])

    states, failures = train_states(
        exprs,
        data,
        U,
        lcfg,
        point_theta=config.theta_mode == "point",
        seed=config.seed,
        workers=config.workers,
        states=states,
        on_chunk=on_chunk,
    )
    t_local = time.perf_counter() - t0
    keep = [i for i, s in enumerate(states) if s is not None]
    if not keep:
        raise RuntimeError("training failed for every kernel")
    for i in keep:
        _write_trace(out / f"elbo_trace_{file_tag(names[i])}.csv", traces[i])

    prior = None
    if config.prior_mean is not None:
        prior = np.array([float(v) for v in config.prior_mean.split(",")])
        if prior.size != len(exprs):
            raise ValueError("prior_mean needs one value per kernel")
        prior = prior[keep]
    kept = [names[i] for i in keep]

    def fit_belief(l_star):
        b = init_belief(kept, l_star, prior_mean=prior, n_samples=config.n_posterior_samples, seed=config.seed)
        return optimize_belief(b, config.belief_config)

    t1 = time.perf_counter()
    # posterior trace: one belief per checkpoint on the L* values reached so far
    steps = sorted(set.intersection(*(set(s for s, _ in snaps[i]) for i in keep)))
    lookup = {i: dict(snaps[i]) for i in keep}
    trace_rows = []
    for c, step in enumerate(steps):
        l_star = np.array([lookup[i][step] for i in keep])
        if not np.all(np.isfinite(l_star)):
            continue
        post = fit_belief(l_star).posterior
        trace_rows += [(c, step, step / config.local_steps, n, p) for n, p in zip(kept, post)]
    belief = fit_belief(np.array([states[i].elbo_star for i in keep]))
    with open(out / "posterior_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "step", "fraction", "kernel", "probability"])
        w.writerows(trace_rows)
    _dump(out / "checkpoint_belief.json", belief_to_json(belief, data))
    t_belief = time.perf_counter() - t1

    metrics = {
        "kernels": kept,
        "posterior": belief.posterior.tolist(),
        "l_star": belief.l_star.tolist(),
        "top_kernel": kept[ranking(belief)[0]],
        "failed": {names[i]: r for i, r in failures.items()},
        "wall_clock": {"local": t_local, "belief": t_belief},
    }
    if config.test_data:
        t2 = time.perf_counter()
        test = ingest_csv(config.test_data)
        kept_states = [states[i] for i in keep]
        pred = predict_run(kept_states, belief, data, test.X, config.n_theta_draws, config.seed, config.observation)
        write_csv(out / "predictions.csv", test.X, test.y, pred)
        metrics["rmse_bma"] = rmse(pred["mean"], test.y)
        metrics["rmse_single"] = rmse(pred["single_mean"], test.y)
        metrics["wall_clock"]["predict"] = time.perf_counter() - t2
    metrics["wall_clock"]["total"] = time.perf_counter() - t0
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics
