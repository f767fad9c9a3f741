"""Command-line entry point: ``autofocus <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Machine-readable
output (CSV or JSON lines) goes to stdout, human summaries to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _arch_kwargs(args):
    kw = {"in_channels": args.in_channels, "num_classes": args.classes}
    if args.channels:
        kw["channels"] = tuple(int(c) for c in args.channels.split(","))
    if args.rates:
        kw["rates"] = tuple(int(r) for r in args.rates.split(","))
    return kw


def cmd_params(args):
    from .models import REPORTED_PARAMS, arch_by_name, param_count
    arch = arch_by_name(args.arch, **_arch_kwargs(args))
    mode = "kernels_only" if args.mode == "kernels" else "all"
    table = param_count(arch, mode)
    print("name,count")
    for name, n in table.items():
        print(f"{name},{n}")
    reported = REPORTED_PARAMS.get(arch.name)
    if reported:
        resid = (table["total"] - reported) / reported
        print(f"{arch.name}: {table['total']} vs reported {reported} ({resid:+.2%})", file=sys.stderr)
    return 0


def cmd_rf(args):
    from .models import arch_by_name, receptive_field
    arch = arch_by_name(args.arch, **_arch_kwargs(args))
    print("layer,kind,phi_min,phi_max,eta")
    states = receptive_field(arch)
    for s in states:
        print(f"{s.layer},{s.kind},{s.phi_min[0]},{s.phi_max[0]},{s.eta[0]}")
    last_hidden = states[-2]
    print(f"{arch.name}: receptive field after last hidden layer "
          f"{last_hidden.phi_min[0]}..{last_hidden.phi_max[0]} voxels per axis", file=sys.stderr)
    return 0


def cmd_gen_phantoms(args):
    import numpy as np
    from .data_io import generate_phantom, load_phantom_spec, normalize, write_manifest, write_volume
    spec = load_phantom_spec(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.n):
        vol = normalize(generate_phantom(spec, i))
        path = out / f"{vol.id}.afnv"
        write_volume(vol, path)
        names.append(path.name)
        print(json.dumps({"volume": str(path), "shape": list(vol.image.shape),
                          "classes": np.bincount(vol.labels.ravel(), minlength=spec.num_classes).tolist()}))
    write_manifest(names, out / "manifest.txt")
    print(f"wrote {args.n} phantoms and {out / 'manifest.txt'}", file=sys.stderr)
    return 0


def cmd_train(args):
    from dataclasses import replace
    from .training import load_config, train
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    trainer = train(cfg, log=lambda r: print(json.dumps(r), flush=True), max_steps=args.max_steps)
    print(f"trained {trainer.step_count} steps, final loss {trainer.losses[-1]:.4f}; "
          f"checkpoints in {cfg.out_dir}", file=sys.stderr)
    return 0


def _load_model(weights, config=None):
    import numpy as np
    from .models import load_weights
    from .training import load_arch, load_config
    if config:
        cfg = load_config(config)
        arch, dtype, window, overlap = cfg.arch_spec(), cfg.dtype, cfg.segment, cfg.eval_overlap
    else:
        sidecar = Path(str(weights) + ".arch.json")
        if not sidecar.exists():
            raise FileNotFoundError(f"no architecture sidecar {sidecar}; pass -c config")
        arch, dtype, window, overlap = load_arch(sidecar), "float32", None, 8
    return load_weights(weights, arch, np.dtype(dtype)), window, overlap


def cmd_eval(args):
    from .training import evaluate, load_volumes
    model, window, overlap = _load_model(args.weights, args.config)
    window = args.window or window or 32
    result = evaluate(model, load_volumes(args.manifest), window, overlap)
    sys.stdout.write(result.csv)
    print(f"mean foreground dice {result.mean_dice():.4f}", file=sys.stderr)
    return 0


def cmd_export_attention(args):
    from .data_io import read_volume
    from .training import export_attention
    model, _, _ = _load_model(args.weights, args.config)
    paths = export_attention(model, read_volume(args.input), args.layer, args.out)
    for p in paths:
        print(json.dumps({"attention_map": str(p)}))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all
    failed = 0
    for report in run_all(range(args.seeds), args.tolerance):
        failed += not report.passed
        print(json.dumps({"case": report.name, "max_rel_error": report.max_error,
                          "passed": report.passed}))
    print(f"gradcheck: {'all passed' if not failed else f'{failed} failed'}", file=sys.stderr)
    return 0 if not failed else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autofocus", description="Autofocus-layer segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def arch_opts(sp):
        sp.add_argument("-a", "--arch", required=True, help="basic | afn1..afn6 | aspp-c | aspp-s")
        sp.add_argument("--in-channels", type=int, default=4)
        sp.add_argument("--classes", type=int, default=5)
        sp.add_argument("--channels", help="comma-separated hidden channel plan")
        sp.add_argument("--rates", help="comma-separated dilation rates")

    sp = sub.add_parser("params", help="count trainable parameters")
    arch_opts(sp)
    sp.add_argument("--mode", choices=["kernels", "all"], default="kernels")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("rf", help="receptive field per layer")
    arch_opts(sp)
    sp.set_defaults(func=cmd_rf)

    sp = sub.add_parser("gen-phantoms", help="write synthetic phantom volumes")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("-n", type=int, required=True)
    sp.add_argument("-o", "--out", required=True)
    sp.set_defaults(func=cmd_gen_phantoms)

    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("-o", "--out")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="sliding-window evaluation, CSV dice report")
    sp.add_argument("-w", "--weights", required=True)
    sp.add_argument("-m", "--manifest", required=True)
    sp.add_argument("-c", "--config")
    sp.add_argument("--window", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-attention", help="write attention maps of one autofocus layer")
    sp.add_argument("-w", "--weights", required=True)
    sp.add_argument("-i", "--input", required=True)
    sp.add_argument("-l", "--layer", type=int, required=True)
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("-c", "--config")
    sp.set_defaults(func=cmd_export_attention)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    # must happen before numpy is first imported
    threads = os.environ.get("AFN_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
