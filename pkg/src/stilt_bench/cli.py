"""``stilt-bench`` command line: gen, run, report, gradcheck.

Failures print one JSON line ``{"error": <code>, "message": <text>}`` on
stderr and exit with status 2 (gradcheck exits 1 when the oracle fails).
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import core, runner
from .data import SyntheticSpec, load_dataset, write_synthetic
from .errors import ConfigError, StiltError
from .model import ModalityInput, ModelConfig, backward, forward, init_model
from .training import LossWeights, weighted_ce_loss


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read JSON ({exc})") from None


def cmd_gen(args):
    spec = SyntheticSpec.from_dict(_read_json(args.spec))
    paths = write_synthetic(spec, args.out)
    for name, path in paths.items():
        manifest, splits = load_dataset(path)  # validate what was written
        sizes = ", ".join(f"{s}={len(v)}" for s, v in splits.items() if v)
        print(f"{name}: {path} ({sizes})")
    return 0


def cmd_run(args):
    config = runner.ExperimentConfig.load(args.config)
    if args.parallel is not None:
        config.parallel_runs = args.parallel
    out = Path(args.out) if args.out else None
    records = runner.run_experiment(config, out)
    out_dir = out if out is not None else config.resolve(config.output_dir)
    print(f"{len(records)} runs written to {out_dir}")
    for row in (out_dir / "stats.csv").read_text().splitlines():
        print(row)
    return 0


def cmd_report(args):
    written = runner.cmd_report(args.dir)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def gradcheck_suite(n_models=20, dim=8, fused_dim=8, batch=4, seed=0, max_coords=8, h=1e-3):
    """Finite-difference check of the full model loss on random small models.

    Dropout is off; batch norm runs in train mode with frozen running stats.
    Returns the worst relative error over all models.
    """
    worst = 0.0
    for k in range(n_models):
        rng = core.DeterministicRng(seed, (k,))
        params = init_model(ModelConfig(dim=dim, fused_dim=fused_dim, dropout=0.0), rng.spawn(0))
        data = rng.spawn(1)
        # move adapters and norms off their identity init so every path is exercised
        for name, t in params.tensors.items():
            if name.endswith(("adapter.W", "adapter.b", "gamma", "beta")):
                t.value += data.normal(0.0, 0.1, t.shape)
        x = ModalityInput(data.normal(size=(batch, dim)), data.normal(size=(batch, dim)))
        y = np.array([0, 1, 2] + [int(v) for v in data.generator.integers(0, 3, batch - 3)])
        w = LossWeights(tuple(data.uniform(0.1, 0.9, 3)))

        def loss():
            return weighted_ce_loss(forward(params, x, "train", update_running=False).logits, y, w)[0]

        params.zero_grad()
        trace = forward(params, x, "train", update_running=False)
        backward(params, trace, weighted_ce_loss(trace.logits, y, w)[1])
        err = core.finite_difference_check(
            loss, params.tensors, h=h, max_coords=max_coords, rng=rng.spawn(2), richardson=True
        )
        worst = max(worst, err)
    return worst


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    worst = gradcheck_suite(n_models=args.models, seed=args.seed)
    worst = float(worst)
    ok = worst < args.tol
    print(json.dumps({"models": args.models, "max_rel_error": worst, "tolerance": args.tol,
                      "passed": ok, "seconds": round(time.perf_counter() - t0, 2)}))
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="stilt-bench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic meme/image/text datasets")
    g.add_argument("--spec", required=True, help="synthetic spec JSON file")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run an experiment grid from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override output_dir")
    r.add_argument("--parallel", type=int, help="override parallel_runs")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="build table4/fig4/contingency/stats CSVs")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=cmd_report)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient oracle")
    gc.add_argument("--models", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-6)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StiltError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
