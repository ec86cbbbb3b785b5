"""Command-line entry point: ``stenomil <subcommand> [flags]``.

Configuration is layered: the ``config.resolved`` already in ``--out`` (if
any), then ``--config``, then explicit flags.  The merged result is written
back to ``--out/config.resolved`` before the stage runs.

Exit codes: 0 success, 1 invalid configuration or missing prerequisite stage,
2 I/O or file-format failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .formats import FormatError
from .pipeline import (
    CONFIG_FILE,
    ConfigError,
    MissingStageError,
    PipelineConfig,
    Workspace,
)

log = logging.getLogger("stenomil")

COMMANDS = ("synth", "pretrain-artery", "pretrain-myo", "encode", "train", "eval", "report", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which is reserved for I/O errors
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stenomil", description="Synthetic-cohort stenosis MIL pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: ./run)")
    p.add_argument("--folds", type=int)
    p.add_argument("--mode", choices=("combined", "arteries", "myo"))
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--paper-scale", action="store_true", help="train for 200,000 iterations")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def resolve_config(args) -> PipelineConfig:
    values: dict = {}
    echoed = args.out / CONFIG_FILE
    if echoed.is_file():
        values.update(pipeline.parse_config_text(echoed.read_text()))
    if args.config is not None:
        values.update(pipeline.parse_config_text(args.config.read_text()))
    for key in ("seed", "folds", "mode", "precision"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.paper_scale:
        values["paper_scale"] = True
    return PipelineConfig.from_mapping(values)


def selftest() -> int:
    """Gradient suite plus quick invariant checks; returns the number of failures."""
    from .evaluation import concordance_auc, roc_auc
    from .formats import checkpoint_from_bytes, checkpoint_to_bytes
    from .mil import Bag, MilModel
    from .synthgen import ArteryGeometry, Stenosis, ffr_oracle
    from .tensor import softmax
    from .tensor.gradcheck import run_gradient_suite

    rng = np.random.default_rng(0)

    def gradients():
        run_gradient_suite(seed=0)

    def softmax_simplex():
        for n in range(1, 31):
            w = softmax(rng.normal(0, 5, n).astype(np.float32)).data
            assert (w >= 0).all() and abs(w.sum() - 1) <= 1e-6

    def mil_permutation():
        model = MilModel("combined", seed=1, dtype=np.float64).eval()
        for n in (1, 2, 7, 30):
            bag = Bag(rng.normal(size=(n, 1024)), rng.normal(size=512))
            perm = rng.permutation(n)
            a, b = model.predict(bag), model.predict(Bag(bag.arteries[perm], bag.myo))
            assert abs(a - b) <= 1e-9, (n, a, b)

    def auc_oracle():
        for _ in range(20):
            s = rng.integers(0, 5, 30).astype(float)
            y = np.r_[0, 1, rng.integers(0, 2, 28)]
            assert abs(roc_auc(s, y).auc - concordance_auc(s, y)) <= 1e-12

    def ffr_calibration():
        g = ArteryGeometry(300, 1.5, 0.0, [Stenosis(100, 10.0, 0.75)])
        assert abs(ffr_oracle(g) - 0.8) <= 0.02
        assert ffr_oracle(ArteryGeometry(300, 1.5)) == 1.0

    def checkpoint_roundtrip():
        state = MilModel("arteries", seed=2).state_dict()
        back = checkpoint_from_bytes(checkpoint_to_bytes(state))
        assert all(np.array_equal(state[k], back[k]) and state[k].dtype == back[k].dtype for k in state)

    failures = 0
    for check in (gradients, softmax_simplex, mil_permutation, auc_oracle, ffr_calibration, checkpoint_roundtrip):
        try:
            check()
            print(f"PASS {check.__name__}")
        except AssertionError as e:
            failures += 1
            print(f"FAIL {check.__name__}: {e}")
    return failures


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"stenomil: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.command == "selftest":
        return 1 if selftest() else 0
    try:
        cfg = resolve_config(args)
        ws = Workspace(args.out)
        ws.write_config(cfg)
        t0 = time.time()
        if args.command == "synth":
            log.info("wrote %d patients to %s", pipeline.stage_synth(ws, cfg), ws.dataset)
        elif args.command == "pretrain-artery":
            log.info("wrote %s", pipeline.stage_pretrain_artery(ws, cfg))
        elif args.command == "pretrain-myo":
            log.info("wrote %s", pipeline.stage_pretrain_myo(ws, cfg))
        elif args.command == "encode":
            log.info("encoded %d patients", pipeline.stage_encode(ws, cfg))
        elif args.command == "train":
            log.info("wrote %d checkpoints", len(pipeline.stage_train(ws, cfg, log.info)))
        elif args.command == "eval":
            out = pipeline.stage_eval(ws, cfg)
            print((out / "summary.txt").read_text(), end="")
        elif args.command == "report":
            path = pipeline.stage_report(ws, cfg)
            print(path.read_text(), end="")
        log.info("%s finished in %.1f s", args.command, time.time() - t0)
        return 0
    except MissingStageError as e:
        print(f"stenomil {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as e:
        print(f"stenomil {args.command}: I/O error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as e:
        print(f"stenomil {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
