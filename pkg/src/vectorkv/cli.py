"""Command-line driver: synth, calibrate, evaluate, sweep, theory.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags. Exit codes: 0 success,
1 failed check or numerical failure, 2 usage error, 3 IO or format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, fields, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import distortion, regression
from .core import ConfigError, RoutingLabel, deploy_pa
from .experiments import VARIANTS, VECTOR, run_variants
from .formats import ActivationDump, FormatError, LayerActivations, read_dump, read_models, write_dump, write_models
from .regression import KTOV, VTOK, CalibrationModel, SingularSystemError
from .rope import RopeTable
from .scorers import SCORERS, score_tokens
from .toymodel import ToyLayer, ToyLayerSpec

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DEFAULT_PC_GRID = (0.25, 0.5, 0.75, 0.9)
SWEEP_DEFAULT_PC = 0.75
SWEEP_STEP = "0.05"
HOLDOUT_FRACTION = 0.1
GAUSSIAN_PC = (0.5, 0.6, 0.7)
GAUSSIAN_PA = (0.15, 0.2, 0.25)

EVALUATE_COLUMNS = ("p_c", "p_a", "variant", "mse", "keys_stored", "values_stored", "budget_entries", "E", "w_bar",
                    "w_star")
SWEEP_COLUMNS = ("p_c", "p_a", "mse", "E", "w_bar", "w_star", "threshold", "keys_stored", "values_stored",
                 "budget_entries", "deploy")
THEORY_COLUMNS = ("check", "case", "value", "reference", "tolerance", "pass")


class UsageError(ValueError):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    if not items:
        raise UsageError("empty list")
    return tuple(float(t) for t in items)


def _pa(text: str):
    text = str(text).strip()
    return "deploy" if text == "deploy" else float(text)


def _ridge(text: str):
    text = str(text).strip()
    return None if text == "auto" else float(text)


def _optional(conv):
    def parse(text):
        return None if str(text).strip() in ("", "none") else conv(text)
    return parse


@dataclass(frozen=True)
class RunConfig:
    """Every setting any command reads; all fields are defaulted."""

    seed: int = 0
    d: int = 64
    d_k: int = 16
    d_v: int = 16
    rank: int = 8
    sigma: float = 0.3
    heads: int = 1
    layers: int = 1
    rope_base: float = 10000.0
    sequences: int = 64
    seq_len: int = 512
    scorer: str = "key-diversity"
    pc: tuple = DEFAULT_PC_GRID
    pa: object = "deploy"
    pa_grid: tuple | None = None
    epsilon: float = 0.0
    ridge: float | None = None
    direction: str = KTOV
    queries: int = 32
    window: int = 16
    dump: str | None = None
    model: str | None = None
    vtok_model: str | None = None
    out: str | None = None

    def toy_spec(self, layer: int = 0) -> ToyLayerSpec:
        return ToyLayerSpec(d=self.d, d_k=self.d_k, d_v=self.d_v, effective_rank=self.rank, noise_sigma=self.sigma,
                            seed=self.seed, n_heads=self.heads, rope_base=self.rope_base, layer=layer)


_PARSERS = {
    "seed": int, "d": int, "d_k": int, "d_v": int, "rank": int, "sigma": float, "heads": int, "layers": int,
    "rope_base": float, "sequences": int, "seq_len": int, "scorer": str, "pc": _float_list, "pa": _pa,
    "pa_grid": _optional(_float_list), "epsilon": float, "ridge": _ridge, "direction": str, "queries": int,
    "window": int, "dump": _optional(str), "model": _optional(str), "vtok_model": _optional(str),
    "out": _optional(str),
}
assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    try:
        return _PARSERS[key](raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _PARSERS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def check_config(cfg: RunConfig) -> RunConfig:
    if cfg.scorer not in SCORERS:
        raise UsageError(f"unknown scorer {cfg.scorer!r}; choose from {', '.join(SCORERS)}")
    if cfg.direction not in (KTOV, VTOK):
        raise UsageError(f"direction must be {KTOV} or {VTOK}")
    if cfg.ridge is not None and cfg.ridge < 0:
        raise UsageError("ridge must be non-negative")
    if cfg.layers < 1 or cfg.seq_len < 1 or cfg.sequences < 0 or cfg.queries < 1 or cfg.window < 1:
        raise UsageError("layers, seq_len, queries and window must be >= 1; sequences >= 0")
    try:
        cfg.toy_spec()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def plan_csv(plan, memory=None) -> str:
    """One ``index,label`` row per token; with ``memory`` a trailing summary
    row per stored-entry field follows the token rows."""
    rows = [{"index": i, "label": RoutingLabel(int(lab)).name.lower()} for i, lab in enumerate(plan.labels)]
    if memory is not None:
        for name in ("keys_stored", "values_stored", "total", "budget_entries"):
            rows.append({"index": name, "label": getattr(memory, name)})
    return _csv_text(("index", "label"), rows)


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig) -> ActivationDump:
    """Toy activations: ``sequences`` sequences of ``seq_len`` tokens per layer,
    positions restarting at 0 for every sequence."""
    if cfg.sequences == 0:
        raise UsageError("empty corpus: sequences must be >= 1")
    if cfg.out is None:
        raise UsageError("synth needs --out")
    layers = []
    for l in range(cfg.layers):
        toy = ToyLayer(cfg.toy_spec(l))
        seqs = [toy.sample(cfg.seq_len, index=i) for i in range(cfg.sequences)]
        layers.append(LayerActivations(np.concatenate([s.keys_pre for s in seqs]),
                                       np.concatenate([s.values for s in seqs]),
                                       np.concatenate([s.positions for s in seqs])))
    dump = ActivationDump(tuple(layers))
    write_dump(cfg.out, dump)
    return dump


def split_holdout(n: int) -> int:
    """Number of leading tokens used for fitting; the trailing 10% is held out."""
    n_test = max(1, int(math.floor(HOLDOUT_FRACTION * n)))
    if n - n_test < 1:
        raise UsageError(f"layer has {n} tokens; need at least 2 to hold out a tail")
    return n - n_test


def calibrate_layer(layer: LayerActivations, ridge: float | None, direction: str,
                    chunk: int = 8192) -> CalibrationModel:
    n_train = split_holdout(layer.n)
    acc = regression.GramAccumulator(layer.d_k, layer.d_v)
    for lo in range(0, n_train, chunk):
        hi = min(lo + chunk, n_train)
        acc = regression.accumulate(acc, layer.keys[lo:hi].astype(np.float64), layer.values[lo:hi].astype(np.float64))
    model = regression.solve_ols(acc, ridge, direction)
    test_k = layer.keys[n_train:].astype(np.float64)
    test_v = layer.values[n_train:].astype(np.float64)
    return model.with_test_r2(regression.r_squared(model, test_k, test_v))


def cmd_calibrate(cfg: RunConfig, stdout=None) -> list[CalibrationModel]:
    if cfg.dump is None or cfg.out is None:
        raise UsageError("calibrate needs --dump and --out")
    stdout = stdout or sys.stdout
    dump = read_dump(cfg.dump)
    models = [calibrate_layer(layer, cfg.ridge, cfg.direction) for layer in dump.layers]
    write_models(cfg.out, models)
    for i, m in enumerate(models):
        stdout.write(f"layer {i}: direction={m.direction} ridge={m.ridge:.6g} held-out R2={m.test_r2:.6f}\n")
    stdout.write(f"mean held-out R2={float(np.mean([m.test_r2 for m in models])):.6f}\n")
    return models


def last_sequence(positions: np.ndarray) -> np.ndarray:
    """Indices of the final sequence, found where positions stop increasing."""
    pos = np.asarray(positions, dtype=np.int64)
    breaks = np.flatnonzero(np.diff(pos) <= 0) + 1
    start = int(breaks[-1]) if breaks.size else 0
    return np.arange(start, pos.shape[0])


@dataclass(frozen=True)
class EvalContext:
    """One layer's evaluation inputs: the context cache, proxy queries and scores."""

    keys_cached: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    queries: np.ndarray
    scores: object
    rope: RopeTable


def eval_context(layer: LayerActivations, cfg: RunConfig) -> EvalContext:
    """The dump carries no query projection, so the rotated keys of the final
    ``queries`` tokens of the last sequence act as queries over the tokens before them."""
    idx = last_sequence(layer.positions)
    if idx.shape[0] < cfg.queries + 2:
        raise UsageError(f"last sequence has {idx.shape[0]} tokens; need more than queries + 1 = {cfg.queries + 1}")
    if layer.d_k % cfg.heads or (layer.d_k // cfg.heads) % 2:
        raise UsageError(f"d_k={layer.d_k} does not split into {cfg.heads} even-width heads")
    positions = layer.positions[idx].astype(np.int64)
    rope = RopeTable(layer.d_k // cfg.heads, int(positions.max()) + 1, cfg.rope_base)
    keys = rope.apply(layer.keys[idx].astype(np.float64), positions)
    values = layer.values[idx].astype(np.float64)
    ctx = slice(0, idx.shape[0] - cfg.queries)
    window = keys[ctx][-cfg.window:]
    scores = score_tokens(cfg.scorer, keys[ctx], window, seed=cfg.seed, n_heads=cfg.heads)
    return EvalContext(keys[ctx], values[ctx], positions[ctx], keys[ctx.stop:], scores, rope)


def _load_models(cfg: RunConfig, dump: ActivationDump) -> tuple[list[CalibrationModel], list[CalibrationModel]]:
    if cfg.model is None:
        raise UsageError("--model is required")
    ktov = read_models(cfg.model)
    if ktov[0].direction != KTOV:
        raise UsageError("--model must be a ktov model")
    if cfg.vtok_model is not None:
        vtok = read_models(cfg.vtok_model)
        if vtok[0].direction != VTOK:
            raise UsageError("--vtok-model must be a vtok model")
    else:
        vtok = [calibrate_layer(layer, cfg.ridge, VTOK) for layer in dump.layers]
    for models in (ktov, vtok):
        if len(models) != len(dump.layers):
            raise UsageError(f"model has {len(models)} layers, dump has {len(dump.layers)}")
        for m, layer in zip(models, dump.layers):
            d_in, d_out = (layer.d_k, layer.d_v) if m.direction == KTOV else (layer.d_v, layer.d_k)
            if (m.d_in, m.d_out) != (d_in, d_out):
                raise UsageError(f"dimension mismatch: model {m.d_out}x{m.d_in}, dump d_k={layer.d_k} d_v={layer.d_v}")
    return ktov, vtok


def _resolve_pa(p_c: float, cfg: RunConfig) -> float:
    return deploy_pa(p_c, cfg.epsilon) if cfg.pa == "deploy" else float(cfg.pa)


def _aggregate(per_layer: list[list]) -> list[dict]:
    """Average MSE and distortion terms over layers; sum stored-entry counts."""
    rows = []
    for results in zip(*per_layer):
        r0 = results[0]
        rows.append({
            "p_c": r0.p_c, "p_a": r0.p_a, "variant": r0.variant,
            "mse": float(np.mean([r.mse for r in results])),
            "keys_stored": sum(r.keys_stored for r in results),
            "values_stored": sum(r.values_stored for r in results),
            "budget_entries": sum(r.budget_entries for r in results),
            "E": float(np.mean([r.E for r in results])),
            "w_bar": float(np.mean([r.w_bar for r in results])),
            "w_star": float(np.mean([r.w_star for r in results])),
        })
    return rows


def _run_grid(cfg: RunConfig, grid: list[tuple[float, float]], variants) -> list[dict]:
    if cfg.dump is None:
        raise UsageError("--dump is required")
    dump = read_dump(cfg.dump)
    ktov, vtok = _load_models(cfg, dump)
    per_layer = []
    for layer, m_kv, m_vk in zip(dump.layers, ktov, vtok):
        ctx = eval_context(layer, cfg)
        results = []
        for p_c, p_a in grid:
            results += run_variants(ctx.keys_cached, ctx.values, ctx.positions, ctx.queries, ctx.scores, p_c, p_a,
                                    m_kv, m_vk, ctx.rope, cfg.heads, variants)
        per_layer.append(results)
    return _aggregate(per_layer)


def cmd_evaluate(cfg: RunConfig) -> str:
    try:
        grid = [(p_c, _resolve_pa(p_c, cfg)) for p_c in cfg.pc]
    except ConfigError as exc:
        raise UsageError(f"invalid grid: {exc}") from exc
    text = _csv_text(EVALUATE_COLUMNS, _run_grid(cfg, grid, VARIANTS))
    _emit(text, cfg.out)
    return text


def default_pa_grid(p_c: float) -> tuple[float, ...]:
    """``0, 0.05, ...`` up to the largest valid ``p_a = min(p_c, 1 - p_c)``."""
    step, top = Decimal(SWEEP_STEP), Decimal(repr(min(p_c, 1.0 - p_c)))
    out, k = [], 0
    while step * k <= top + Decimal("1e-12"):
        out.append(float(step * k))
        k += 1
    return tuple(out)


def cmd_sweep(cfg: RunConfig, pc_given: bool = False) -> str:
    if pc_given:
        if len(cfg.pc) != 1:
            raise UsageError("sweep takes exactly one --pc value")
        p_c = cfg.pc[0]
    else:
        p_c = SWEEP_DEFAULT_PC
    grid = cfg.pa_grid if cfg.pa_grid is not None else default_pa_grid(p_c)
    dep = deploy_pa(p_c, cfg.epsilon) if 0.0 <= p_c < 1.0 else None
    rows = []
    try:
        results = _run_grid(cfg, [(p_c, p_a) for p_a in grid], (VECTOR,))
    except ConfigError as exc:
        raise UsageError(f"invalid grid entry: {exc}") from exc
    for r in results:
        thr = distortion.expansion_threshold(r["w_bar"], r["w_star"]) if r["w_bar"] + r["w_star"] > 0 else 1.0
        rows.append({**r, "threshold": thr, "deploy": dep is not None and abs(r["p_a"] - dep) < 1e-12})
    text = _csv_text(SWEEP_COLUMNS, rows)
    _emit(text, cfg.out)
    return text


def theory_rows(seed: int) -> list[dict]:
    rows = []

    def add(check, case, value, reference, tolerance, ok):
        rows.append({"check": check, "case": case, "value": float(value), "reference": float(reference),
                     "tolerance": float(tolerance), "pass": bool(ok)})

    gm = distortion.GaussianResidualModel(1.0, 2.0)
    for i, p_c in enumerate(GAUSSIAN_PC):
        for j, p_a in enumerate(GAUSSIAN_PA):
            c = distortion.CompressionConfig(p_c, p_a)
            closed = distortion.gaussian_one_minus_r2(gm, c)
            mc = distortion.mc_gaussian_one_minus_r2(gm, c, seed=seed * 100 + 3 * i + j)
            add("gaussian_one_minus_r2", f"p_c={p_c} p_a={c.p_a:.6g}", closed, mc, 0.01,
                abs(closed - mc) <= 0.01 * abs(mc))
    for k, x in enumerate((0.5, 1.0, 2.0)):
        closed = distortion.truncated_normal_second_moment(1.0, x)
        mc = distortion.mc_truncated_second_moment(1.0, x, seed=seed * 100 + 50 + k)
        add("truncated_second_moment", f"sigma=1 x={x}", closed, mc, 0.005, abs(closed - mc) <= 0.005 * abs(mc))
    study = distortion.agreement_study(500, seed)
    add("agreement", f"beta scored={study.n_scored}", study.rate, 0.95, 0.0, study.rate >= 0.95)
    for regime in ("zero", "one"):
        s = distortion.agreement_study(100, seed, regime=regime)
        add("agreement", f"errors={regime} scored={s.n_scored}", s.rate, 1.0, 0.0, s.rate == 1.0)
    for ratio, expected in ((0.1, 1.0 / 1.1), (0.5, 2.0 / 3.0), (1.0, 0.5)):
        thr = distortion.expansion_threshold(1.0, ratio)
        add("threshold", f"w_star/w_bar={ratio}", thr, expected, 1e-12, abs(thr - expected) <= 1e-12)
    return rows


def cmd_theory(cfg: RunConfig) -> tuple[str, bool]:
    rows = theory_rows(cfg.seed)
    text = _csv_text(THEORY_COLUMNS, rows)
    _emit(text, cfg.out)
    return text, all(r["pass"] for r in rows)


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key = value file; flags override it")
    p.add_argument("--seed", default=S)
    p.add_argument("--scorer", default=S, help="|".join(SCORERS))
    p.add_argument("--pc", default=S, help="comma-separated compression ratios")
    p.add_argument("--pa", default=S, help="approximation ratio or 'deploy'")
    p.add_argument("--pa-grid", dest="pa_grid", default=S, help="comma-separated p_a values (sweep)")
    p.add_argument("--epsilon", default=S)
    p.add_argument("--ridge", default=S, help="ridge strength or 'auto'")
    p.add_argument("--direction", default=S, help="ktov|vtok")
    p.add_argument("--out", default=S)
    p.add_argument("--dump", default=S)
    p.add_argument("--model", default=S)
    p.add_argument("--vtok-model", dest="vtok_model", default=S)
    for name in ("d", "d_k", "d_v", "rank", "sigma", "heads", "layers", "rope_base", "sequences", "seq_len",
                 "queries", "window"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vectorkv", description="Three-way KV-cache allocation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("synth", "write a synthetic activation dump"),
                            ("calibrate", "fit per-layer linear maps from a dump"),
                            ("evaluate", "compare VECTOR, binary eviction and K-only over a p_c grid"),
                            ("sweep", "MSE and distortion across p_a at one p_c"),
                            ("theory", "closed-form versus Monte Carlo checks")):
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def resolve_config(ns: argparse.Namespace) -> tuple[RunConfig, set]:
    values = vars(ns).copy()
    values.pop("command")
    merged = read_config_file(values.pop("config")) if "config" in values else {}
    given = set(merged) | set(values)
    for key, raw in values.items():
        merged[key] = _coerce(key, raw)
    return check_config(replace(RunConfig(), **merged)), given


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg, given = resolve_config(ns)
        if ns.command == "synth":
            cmd_synth(cfg)
        elif ns.command == "calibrate":
            cmd_calibrate(cfg)
        elif ns.command == "evaluate":
            cmd_evaluate(cfg)
        elif ns.command == "sweep":
            cmd_sweep(cfg, "pc" in given)
        elif ns.command == "theory":
            _, ok = cmd_theory(cfg)
            if not ok:
                print("theory: one or more checks failed", file=sys.stderr)
                return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SingularSystemError, regression.DegenerateTargetError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        # UsageError, ConfigError and shape complaints from the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
