"""``pka`` command-line entry point.

Every subcommand writes machine-readable output (JSON verdicts, CSV curves,
PKAT tensors) plus PNG figures next to it. Primary outputs carry the fully
resolved run config; wall-clock timestamps go to a ``.meta.json`` sidecar so
reruns with the same flags are byte-identical (timed benchmark columns
excepted, see ``bench --no-timing``).

Exit codes: 0 success, 1 a verification verdict failed, 2 usage or input
error, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .cost import measure_cost, loglog_slope, scaling_layout
from .layout import build_mask
from .redundancy import band_mass
from .sampler import cdf_t, preset, sample_t, summarize
from .tensor import ContractError, Rng, read_tensor, write_tensor

ENV_THREADS = "PKA_NUM_THREADS"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3
COMMANDS = ("verify", "gradcheck", "bench", "analyze", "sample-timesteps", "train-toy", "denoise")


class UsageError(Exception):
    pass


def _emit_error(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}), file=sys.stderr)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None


def build_parser() -> tuple[Parser, dict[str, Parser]]:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=("fp32", "fp64"), default="fp32")
    common.add_argument("--config", type=Path, default=None, help="JSON file of flag overrides")

    parser = Parser(prog="pka", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"pka {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    subs = {}

    p = sub.add_parser("verify", parents=[common], help="sparse engine vs dense oracle")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--out", type=Path, default=None)
    subs["verify"] = p

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--kernels", type=_str_list, default=None)
    p.add_argument("--out", type=Path, default=None)
    subs["gradcheck"] = p

    p = sub.add_parser("bench", parents=[common], help="cost scaling in the number of conditions")
    p.add_argument("kind", choices=("scaling",))
    p.add_argument("--conditions", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--tokens-per-cond", type=int, default=64)
    p.add_argument("--mode", type=_str_list, default=["dense", "pka"])
    p.add_argument("--text-len", type=int, default=8)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--h", type=int, default=4)
    p.add_argument("--step", choices=("first", "cached"), default="first")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--no-timing", action="store_true", help="leave wall_ns empty for byte-identical reruns")
    p.add_argument("--out", type=Path, default=None)
    subs["bench"] = p

    p = sub.add_parser("analyze", parents=[common], help="band-mass profile of an attention dump")
    p.add_argument("kind", choices=("attn",))
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--grid", type=_grid, required=True)
    p.add_argument("--radii", type=_int_list, default=[0, 1, 2, 4])
    p.add_argument("--out", choices=("json", "csv"), default="json", help="output format")
    p.add_argument("--output", type=Path, default=None, help="output file (default stdout)")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--head", type=int, default=None)
    p.add_argument("--step", type=int, default=None)
    subs["analyze"] = p

    p = sub.add_parser("sample-timesteps", parents=[common], help="draw training timesteps")
    p.add_argument("--preset", default="csas")
    p.add_argument("-n", "--n", type=int, default=100_000)
    p.add_argument("--out", type=Path, default=None)
    subs["sample-timesteps"] = p

    p = sub.add_parser("train-toy", parents=[common], help="train the toy multi-condition model")
    p.add_argument("--preset", default="csas")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--attn", choices=("pka", "dense"), default="pka")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    subs["train-toy"] = p

    p = sub.add_parser("denoise", parents=[common], help="generate grids with a toy model")
    p.add_argument("--model", type=Path, default=None, help="train-toy output dir (default: random model)")
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--attn", choices=("pka", "dense"), default=None)
    p.add_argument("--ksa-eps", type=float, default=None)
    p.add_argument("--ksa-mode", choices=("softmax", "relative"), default="softmax")
    p.add_argument("--dump-attn", type=Path, default=None, help="write head-averaged X->SP1 attention (PKAT)")
    p.add_argument("--out", type=Path, required=True)
    subs["denoise"] = p
    return parser, subs


# --------------------------------------------------------------------------- config

def _load_config(path: Path, command: str, sub: Parser) -> tuple[dict, dict]:
    """Flag defaults for ``command`` and toy-model overrides from a JSON config file."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    dests = {a.dest for a in sub._actions}
    flags, toy = {}, {}
    for key, val in doc.items():
        if key in COMMANDS:
            if key != command:
                continue
            if not isinstance(val, dict):
                raise UsageError(f"config section {key!r} must be an object")
            for k, v in val.items():
                dest = k.replace("-", "_")
                if dest not in dests or dest in ("config", "help"):
                    raise UsageError(f"unknown option {k!r} in config section {key!r}")
                flags[dest] = v
        elif key == "toy":
            if not isinstance(val, dict):
                raise UsageError("config section 'toy' must be an object")
            toy = dict(val)
        elif key.replace("-", "_") in ("seed", "precision"):
            flags[key.replace("-", "_")] = val
        else:
            raise UsageError(f"unknown config key {key!r}")
    return flags, toy


def _coerce(sub: Parser, flags: dict) -> dict:
    """Apply each action's ``type`` to string values taken from JSON."""
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for k, v in flags.items():
        a = actions[k]
        if isinstance(v, str) and a.type is not None:
            v = a.type(v)
        elif isinstance(v, list) and a.type in (_int_list, _str_list):
            v = [int(x) for x in v] if a.type is _int_list else [str(x) for x in v]
        if a.choices is not None and v not in a.choices:
            raise UsageError(f"config value {v!r} for {k!r} not in {list(a.choices)}")
        out[k] = v
    return out


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _header(args, toy: dict | None = None) -> dict:
    resolved = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("config", "func")}
    head = {"tool": "pka", "version": __version__, "command": args.command, "args": resolved,
            "threads": os.environ.get(ENV_THREADS)}
    if toy is not None:
        head["toy"] = toy
    return head


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _write_meta(primary: Path, started: float) -> None:
    finished = time.time()
    meta = {"started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.fromtimestamp(finished, timezone.utc).isoformat(),
            "elapsed_s": round(finished - started, 3)}
    target = primary / "meta.json" if primary.is_dir() else primary.with_name(primary.name + ".meta.json")
    target.write_text(_dumps(meta))


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


# --------------------------------------------------------------------------- commands

def cmd_verify(args) -> int:
    from .suites import equivalence_suite

    res = equivalence_suite(args.seed, args.instances, args.precision)
    doc = {"config": _header(args), **res.to_dict()}
    _emit(_dumps(doc), args.out)
    if args.out:
        print(json.dumps({k: doc[k] for k in ("instances", "max_abs_err", "pass")}))
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    from .suites import gradcheck_suite

    if args.precision != "fp64":
        print(json.dumps({"note": "gradient checks always run in fp64"}), file=sys.stderr)
    res = gradcheck_suite(args.seed, args.instances, kernels=args.kernels)
    doc = {"config": _header(args), "instances": args.instances, **res.to_dict()}
    _emit(_dumps(doc), args.out)
    return EXIT_OK if res.passed else EXIT_FAIL


def bench_rows(args) -> tuple[list[dict], dict]:
    dtype = np.float32 if args.precision == "fp32" else np.float64
    rows, reports = [], {}
    for mode in sorted(args.mode):
        if mode not in ("dense", "pka"):
            raise UsageError(f"bench mode must be dense or pka, got {mode!r}")
        for c in sorted(args.conditions):
            layout = scaling_layout(c, args.tokens_per_cond, args.text_len)
            spec = build_mask(layout, mode)
            first = measure_cost(layout, spec, args.d, args.h, "first", dtype, args.seed, args.repeats)
            cached = None
            if mode != "dense":
                cached = measure_cost(layout, spec, args.d, args.h, "cached", dtype, args.seed, args.repeats)
            rep = first if args.step == "first" else cached
            if rep is None:
                raise ContractError("dense masks have no cached step; use --step first")
            rows.append({"mode": mode, "c": c, "entries": rep.score_entries, "flops": rep.flops,
                         "bytes": rep.score_bytes, "wall_ns": None if args.no_timing else rep.wall_time_ns})
            for r in (first, cached):
                if r is not None and args.no_timing:
                    r.wall_time_ns = None
            reports.setdefault(mode, {})[str(c)] = {
                "mask": spec.to_dict(),
                "first_step": first.to_dict(),
                "cached_step": None if cached is None else cached.to_dict(),
            }
    return rows, reports


def _bench_summary(rows: list[dict]) -> dict:
    out = {}
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((r["c"], r) for r in rows if r["mode"] == mode)
        if len(pts) >= 2:
            out[f"{mode}_entries_slope"] = loglog_slope([c for c, _ in pts], [r["entries"] for _, r in pts])
            out[f"{mode}_bytes_slope"] = loglog_slope([c for c, _ in pts], [r["bytes"] for _, r in pts])
    by = {(r["mode"], r["c"]): r for r in rows}
    for c in sorted({r["c"] for r in rows}):
        if ("dense", c) in by and ("pka", c) in by:
            out.setdefault("flop_ratio", {})[str(c)] = by[("dense", c)]["flops"] / by[("pka", c)]["flops"]
            wd, wp = by[("dense", c)]["wall_ns"], by[("pka", c)]["wall_ns"]
            if wd and wp:
                out.setdefault("wall_ratio", {})[str(c)] = wd / wp
    return out


def cmd_bench(args) -> int:
    rows, reports = bench_rows(args)
    buf = io.StringIO()
    buf.write(f"# {json.dumps(_header(args), sort_keys=True)}\n")
    w = csv.DictWriter(buf, fieldnames=["mode", "c", "entries", "flops", "bytes", "wall_ns"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    _emit(buf.getvalue(), args.out)
    if args.out:
        summary = _bench_summary(rows)
        doc = {"config": _header(args), "summary": summary, "reports": reports}
        args.out.with_suffix(".json").write_text(_dumps(doc))
        plotting.plot_scaling(rows, plotting.figure_path(args.out, "scaling"))
        if not args.no_timing:
            plotting.plot_scaling(rows, plotting.figure_path(args.out, "wall"), metric="wall_ns")
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    attn = read_tensor(args.input)
    prov = {k: getattr(args, k) for k in ("layer", "head", "step") if getattr(args, k) is not None}
    prov["source"] = str(args.input)
    prof = band_mass(attn, args.grid, args.radii, prov)
    baseline = prof.uniform_baseline(args.grid)
    if args.out == "json":
        text = _dumps({"config": _header(args), **prof.to_dict(), "uniform_baseline": baseline})
    else:
        buf = io.StringIO()
        buf.write(f"# {json.dumps(_header(args), sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["radius", "mass", "uniform"])
        for r, m, u in zip(prof.radii, prof.mass, baseline):
            w.writerow([r, repr(m), repr(u)])
        text = buf.getvalue()
    _emit(text, args.output)
    if args.output:
        plotting.plot_band_mass(prof.radii, prof.mass, baseline, plotting.figure_path(args.output, "band"))
    return EXIT_OK


def cmd_sample_timesteps(args) -> int:
    cfg = preset(args.preset)
    if args.n < 1:
        raise UsageError("-n must be positive")
    t = sample_t(Rng(args.seed), cfg, args.n)
    summary = {"config": _header(args), **summarize(t, cfg)}
    text = _dumps(summary)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(f"# {json.dumps(_header(args), sort_keys=True)}\n")
            fh.writelines(f"{x:.17g}\n" for x in t)
        args.out.with_suffix(".json").write_text(text)

        def pdf(g):
            return np.gradient(cdf_t(cfg, g), g)

        plotting.plot_timesteps(t, plotting.figure_path(args.out, "hist"), pdf, cfg.name)
    sys.stdout.write(text)
    return EXIT_OK


def _toy_config(args, toy: dict, **extra):
    from .toy import ToyModelConfig

    fields = {**toy, **extra, "seed": args.seed, "precision": args.precision}
    unknown = sorted(set(toy) - set(ToyModelConfig.__dataclass_fields__))
    if unknown:
        raise UsageError(f"unknown toy config keys {unknown}")
    try:
        return ToyModelConfig.from_dict(fields)
    except TypeError as exc:
        raise UsageError(f"bad toy config: {exc}") from None


def cmd_train_toy(args, toy: dict) -> int:
    from . import toy as toymod

    cfg = _toy_config(args, toy, sampler=args.preset, iterations=args.iters, attn=args.attn,
                      eval_every=args.eval_every)
    preset(cfg.sampler)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = toymod.train(cfg)
    except toymod.TrainingError as exc:
        toymod.write_trace(exc.trace, out / "trace.csv")
        raise
    toymod.write_trace(res.trace, out / "trace.csv")
    toymod.save_model(res.model, out)
    final = res.final
    doc = {"config": _header(args, cfg.to_dict()), "final": final,
           "initial_loss": res.trace[0]["loss"]}
    (out / "run.json").write_text(_dumps(doc))
    plotting.plot_trace(res.trace, out / "loss.png", f"{cfg.sampler} / {cfg.attn}")
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_denoise(args, toy: dict) -> int:
    from . import toy as toymod

    if args.model is not None:
        model = toymod.load_model(args.model)
        if args.precision == "fp64":
            model = model.astype(np.float64)
    else:
        model = toymod.ToyDiT(_toy_config(args, toy))
    cfg = model.cfg
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    ev = toymod.make_samples(cfg, args.samples, Rng(args.seed).spawn(10))
    noise = Rng(args.seed).spawn(11).normal((args.samples, cfg.N, cfg.channels), dtype=cfg.dtype)
    trace = []
    gen = toymod.denoise(model, ev.conditions(), args.steps, use_cache=not args.no_cache, noise=noise,
                         attn=args.attn, kw_eps=args.ksa_eps, kw_mode=args.ksa_mode, trace=trace)
    if trace:
        toymod.check_mask_protocol(trace)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "generated.pkat", gen)
    doc = {
        "config": _header(args, cfg.to_dict()),
        "cond_mse": toymod.reconstruction_mse(cfg, gen, ev.spatial) if cfg.n_spatial else None,
        "active_tokens": [[int(e["computed"].sum()) for e in trace if e["step"] == s]
                          for s in sorted({e["step"] for e in trace})],
    }
    if args.dump_attn is not None:
        record = {}
        t = np.full(args.samples, 0.5)
        model.forward(ev.conditions(), toymod.interpolate(ev.target, noise, t), t, attn="dense", record=record)
        block = toymod.x_to_sp_attention(record["probs"][-1], model.layout)
        write_tensor(args.dump_attn, block[0].mean(axis=0))
        doc["dump_attn"] = {"path": str(args.dump_attn), "layer": cfg.layers - 1, "t": 0.5, "sample": 0}
    (out / "denoise.json").write_text(_dumps(doc))
    plotting.plot_grids(np.concatenate([ev.target, gen]), cfg.grid, out / "samples.png",
                        ["target"] * args.samples + ["generated"] * args.samples)
    print(json.dumps({k: doc[k] for k in ("cond_mse",)}))
    return EXIT_OK


# --------------------------------------------------------------------------- entry

def _thread_limit():
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        toy = {}
        if args.config is not None:
            sub = subs[args.command]
            flags, toy = _load_config(args.config, args.command, sub)
            sub.set_defaults(**_coerce(sub, flags))
            args = parser.parse_args(argv)
        started = time.time()
        with _thread_limit():
            handler = {
                "verify": cmd_verify, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
                "analyze": cmd_analyze, "sample-timesteps": cmd_sample_timesteps,
            }.get(args.command)
            code = handler(args) if handler else (cmd_train_toy if args.command == "train-toy" else cmd_denoise)(args, toy)
        primary = getattr(args, "out", None) if args.command != "analyze" else args.output
        if isinstance(primary, Path) and primary.exists():
            _write_meta(primary, started)
        return code
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        _emit_error("usage", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except Exception as exc:  # invariant breaches: accounting, cache state, protocol, divergence
        _emit_error(type(exc).__name__, str(exc), EXIT_INVARIANT)
        return EXIT_INVARIANT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
