"""Command line: ``sast run | sweep | compare``.

Samples come either from an event CSV (cut into fixed-duration samples and fed
through one stateful backbone) or from a synthetic density suite (one fresh
backbone state per scene). All outputs are plain text and deterministic for a
given config and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import events as ev
from ._backend import env_errors, set_numeric
from .backbone import SastBackbone
from .config import ConfigError, RunConfig, dump_config, from_mapping, load_config

STATS_COLUMNS = ["sample_id", "event_sparsity_mean", "tokens_total", "tokens_retained", "retain_ratio",
                 "windows_retained", "a_flops", "dense_a_flops", "reduction_pct"]
LAYER_COLUMNS = ["sample_id", "stage", "layer", "partition", "N_w", "N_t", "tokens_retained",
                 "windows_retained", "retain_ratio", "K_max", "a_flops", "dense_a_flops"]
SAMPLE_COLUMNS = ["sample_id", "source", "density", "scene_seed", "t_start", "n_events"]
SWEEP_COLUMNS = ["a", "b", "mean_a_flops", "mean_retain_ratio"]
COMPARE_COLUMNS = ["variant", "sample_id", "a_flops", "dense_a_flops", "retain_ratio", "divergence"]
COMPARE_VARIANTS = ("sast", "sast-cb", "dense", "fixed-ratio")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    sample_id: int
    source: str  # "synthetic" or the input path
    density: float
    scene_seed: int
    t_start: int


def synthetic_specs(cfg: RunConfig) -> list[SampleSpec]:
    """Density-major suite: ``samples`` seeds per density level."""
    out = []
    for d in cfg.density:
        for k in range(cfg.samples):
            out.append(SampleSpec(len(out), "synthetic", float(d), cfg.seed + k, 0))
    return out


def load_input(cfg: RunConfig) -> list[tuple[SampleSpec, np.ndarray]]:
    events = ev.read_events(cfg.input, cfg.width, cfg.height)
    pieces = ev.split_samples(events, cfg.sample_duration_us)
    return [(SampleSpec(i, cfg.input, float("nan"), -1, t0), e) for i, (t0, e) in enumerate(pieces)]


def sample_events(cfg: RunConfig, spec: SampleSpec) -> np.ndarray:
    return ev.synth_scene(cfg.scene(spec.density, spec.scene_seed))


@dataclass
class SampleResult:
    spec: SampleSpec
    n_events: int
    sparsity_mean: float
    step: object  # StepOutput
    features: list


def _process(cfg: RunConfig, net: SastBackbone, spec: SampleSpec, events: np.ndarray) -> SampleResult:
    vox = ev.voxelize(events, cfg.height, cfg.width, cfg.n_time_bins, cfg.sample_duration_us, spec.t_start)
    out = net.step(vox)
    return SampleResult(spec, len(events), float(ev.event_sparsity(vox).mean()), out, out.features)


_worker_nets: dict = {}


def _worker_init(numeric):
    if numeric:
        set_numeric(numeric)


def _synthetic_task(args):
    cfg, spec, overrides = args
    key = (dump_config(cfg), tuple(sorted(overrides.items())))
    net = _worker_nets.get(key)
    if net is None:
        base = SastBackbone(cfg.backbone_config())
        net = base.with_overrides(**overrides) if overrides else base
        _worker_nets.clear()
        _worker_nets[key] = net
    net.reset()
    return _process(cfg, net, spec, sample_events(cfg, spec))


def run_suite(cfg: RunConfig, overrides: dict | None = None, net: SastBackbone | None = None) -> list[SampleResult]:
    """Process every sample; results come back in sample-id order."""
    overrides = overrides or {}
    if net is None:
        net = SastBackbone(cfg.backbone_config())
        if overrides:
            net = net.with_overrides(**overrides)
    if cfg.input is not None:
        net.reset()
        return [_process(cfg, net, spec, e) for spec, e in load_input(cfg)]
    specs = synthetic_specs(cfg)
    if cfg.workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg.numeric,)) as pool:
            return list(pool.map(_synthetic_task, [(cfg, s, overrides) for s in specs]))
    results = []
    for spec in specs:
        net.reset()
        results.append(_process(cfg, net, spec, sample_events(cfg, spec)))
    return results


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in r])


def stats_row(r: SampleResult) -> list:
    s = r.step
    return [r.spec.sample_id, r.sparsity_mean, s.tokens_total, s.tokens_retained, s.retain_ratio,
            s.windows_retained, s.flops.a_flops, s.flops.dense_a_flops, s.flops.reduction_pct]


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    H, W = image.shape
    lines = ["P2", f"{W} {H}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in image]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def heatmap_to_gray(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-image min-max scaling to 0..255; a constant image maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        g = np.rint((v - lo) / (hi - lo) * 255.0)
    else:
        g = np.zeros_like(v)
    return g.astype(np.int64), lo, hi


def write_images(out_dir: str, r: SampleResult) -> None:
    hdir = os.path.join(out_dir, "heatmaps")
    mdir = os.path.join(out_dir, "masks")
    os.makedirs(hdir, exist_ok=True)
    os.makedirs(mdir, exist_ok=True)
    for si, stage in enumerate(r.step.stats, start=1):
        for li, st in enumerate(stage, start=1):
            stem = f"s{r.spec.sample_id:04d}_stage{si}_layer{li}"
            gray, lo, hi = heatmap_to_gray(st.score_heatmap)
            write_pgm(os.path.join(hdir, stem + ".pgm"), gray)
            with open(os.path.join(hdir, stem + ".json"), "w", encoding="utf-8") as fh:
                json.dump({"min": lo, "max": hi, "maxval": 255, "quantity": "token_score"}, fh, sort_keys=True)
                fh.write("\n")
            write_pgm(os.path.join(mdir, stem + ".pgm"), st.token_mask.astype(np.int64) * 255)


def write_run(out_dir: str, cfg: RunConfig, results: list[SampleResult]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "stats.csv"), STATS_COLUMNS, [stats_row(r) for r in results])
    layer_rows = []
    for r in results:
        for si, stage in enumerate(r.step.stats, start=1):
            for li, st in enumerate(stage, start=1):
                layer_rows.append([r.spec.sample_id, si, li, "window" if li % 2 else "grid", st.N_w, st.N_t,
                                   st.n_tokens, st.n_windows, st.retain_ratio_tokens, st.K_max,
                                   st.a_flops, st.dense_a_flops])
    _write_csv(os.path.join(out_dir, "layers.csv"), LAYER_COLUMNS, layer_rows)
    _write_csv(os.path.join(out_dir, "samples.csv"), SAMPLE_COLUMNS,
               [[r.spec.sample_id, r.spec.source, r.spec.density, r.spec.scene_seed, r.spec.t_start, r.n_events]
                for r in results])
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        # the output location is left out so identical runs give identical files
        fh.write(dump_config(cfg, include_out=False))
    if cfg.write_images:
        for r in results:
            write_images(out_dir, r)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(cfg: RunConfig) -> list[SampleResult]:
    results = run_suite(cfg)
    write_run(cfg.out, cfg, results)
    return results


def cmd_sweep(cfg: RunConfig) -> list[list]:
    base = SastBackbone(cfg.backbone_config())
    rows = []
    for a in cfg.a_grid:
        for b in cfg.b_grid:
            results = run_suite(cfg, {"a": a, "b": b}, base.with_overrides(a=a, b=b))
            rows.append([a, b, float(np.mean([r.step.flops.a_flops for r in results])),
                         float(np.mean([r.step.retain_ratio for r in results]))])
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "sweep.csv"), SWEEP_COLUMNS, rows)
    return rows


def _divergence(features, reference) -> float:
    # stages 2-4 are the ones feeding detection heads
    diff = np.concatenate([(f - g).ravel() for f, g in zip(features[1:], reference[1:])])
    return float(np.mean(diff.astype(np.float64) ** 2))


def cmd_compare(cfg: RunConfig) -> list[list]:
    base = SastBackbone(cfg.backbone_config())
    variants = {
        "sast": {"mode": "sast", "cb_enabled": False},
        "sast-cb": {"mode": "sast", "cb_enabled": True},
        "dense": {"mode": "dense", "cb_enabled": False},
        "fixed-ratio": {"mode": "fixed", "cb_enabled": False},
    }
    runs = {}
    for name in COMPARE_VARIANTS:
        kw = variants[name]
        runs[name] = run_suite(cfg, kw, base.with_overrides(**kw))
    rows = []
    for name in COMPARE_VARIANTS:
        for r, d in zip(runs[name], runs["dense"]):
            rows.append([name, r.spec.sample_id, r.step.flops.a_flops, r.step.flops.dense_a_flops,
                         r.step.retain_ratio, _divergence(r.features, d.features)])
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "compare.csv"), COMPARE_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML config document")
    common.add_argument("--out", help="output directory")
    common.add_argument("--input", help="event CSV (t,x,y,p); omit for the synthetic suite")
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int, help="synthetic scenes per density level")
    common.add_argument("--density", type=_floats, help="density levels, e.g. 0.1,0.5,0.9")
    common.add_argument("--a", type=_floats, help="score scale a (comma list for sweep)")
    common.add_argument("--b", type=_floats, help="threshold base b (comma list for sweep)")
    common.add_argument("--p", type=float, help="p-norm order")
    common.add_argument("--cb", action=argparse.BooleanOptionalAction, default=None,
                        help="context broadcasting on the selected tokens")
    common.add_argument("--fixed-ratio", type=float, dest="fixed_ratio", help="window drop ratio of the fixed baseline")
    common.add_argument("--workers", type=int)
    common.add_argument("--no-images", action="store_true", help="skip heatmap and mask images")
    sub.add_parser("run", parents=[common], help="run the backbone and export stats, heatmaps and masks")
    sub.add_parser("sweep", parents=[common], help="grid over a and b; mean A-FLOPs and retain ratio")
    sub.add_parser("compare", parents=[common], help="sast, sast-cb, dense and fixed-ratio side by side")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    for key in ("out", "input", "seed", "samples", "density", "p", "fixed_ratio", "workers"):
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    if args.cb is not None:
        over["cb_enabled"] = args.cb
    if args.no_images:
        over["write_images"] = False
    for key in ("a", "b"):
        v = getattr(args, key)
        if v is None:
            continue
        if not v:
            raise ConfigError(f"--{key} needs at least one value")
        if args.command == "sweep":
            over[f"{key}_grid"] = v
        elif len(v) != 1:
            raise ConfigError(f"--{key} takes a single value outside sweep")
        else:
            over[key] = v[0]
    cfg = from_mapping(over, cfg)
    if cfg.input is not None and not os.path.isfile(cfg.input):
        raise ConfigError(f"input file {cfg.input} does not exist")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for msg in env_errors():
        print(f"sast {args.command}: error: {msg}", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        if cfg.numeric:
            set_numeric(cfg.numeric)
        if args.command == "run":
            results = cmd_run(cfg)
            print(f"wrote {len(results)} samples to {cfg.out}")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg)
            print(f"wrote {len(rows)} grid points to {os.path.join(cfg.out, 'sweep.csv')}")
        else:
            rows = cmd_compare(cfg)
            print(f"wrote {len(rows)} rows to {os.path.join(cfg.out, 'compare.csv')}")
    except (ConfigError, ev.EventParseError, ValueError, OSError) as exc:
        print(f"sast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
