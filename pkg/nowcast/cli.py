"""
Command-line interface: ``run_nowcast.py {gen-data,train,predict,score,gradcheck,baseline,ablate}``.

Exit codes: 0 success, 1 failed check or invalid input, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from . import losses
from .baseline import linear_readout_baseline, persistence_baseline
from .binning import DEFAULT_BINS
from .checkpoint import HISTORY_NAME, load_checkpoint, save_checkpoint
from .config import RunConfig, configure_logging, default_for, resolve_config
from .dataio import MANIFEST_NAME, TENSOR_SUFFIX, SequenceStore, input_window, read_manifest, truth_window, write_tensor
from .errors import DatasetError, GeometryError, NowcastError
from .metrics import evaluate, format_score_table
from .model import NetworkCheckTrial, network_grad_check
from .synth import PRESETS, read_dataset_info, synth_generate, synth_preset
from .training import predict, train, unet_config_for

logger = logging.getLogger(__name__)

LOSS_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-2
ABLATION_COLUMNS = ["loss", "tfi", "arch", "seeds", "mean_val_mcsi", "mean_val_mf1"]


class CountMismatch(Exception):
    """Prediction and truth sets of different sizes; reported as a usage error."""


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _show(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def _config_flag(parser: argparse.ArgumentParser, key: str, *names: str, help: str, **kwargs):
    """A flag backed by a RunConfig key: unset flags fall through to the config file, then the default."""
    parser.add_argument(*names, dest=key, default=None, help=f"{help} (default: {_show(default_for(key))})", **kwargs)


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--data", required=True, help="dataset root holding train/ and val/ splits")
    parser.add_argument("--config", default=None, help="flat key = value TOML file (default: none)")
    _config_flag(parser, "loss", "--loss", choices=["dice", "ml_dice"], help="training loss")
    _config_flag(parser, "logcosh", "--logcosh", type=_on_off, metavar="{on,off}", help="logcosh transform of the loss")
    _config_flag(parser, "tfi", "--tfi", type=_on_off, metavar="{on,off}", help="temporal frame interpolation")
    _config_flag(parser, "aug", "--aug", type=_on_off, metavar="{on,off}", help="random flips")
    _config_flag(parser, "arch", "--arch", choices=["unet2d", "unet3d"], help="network variant")
    _config_flag(parser, "epochs", "--epochs", type=int, help="maximum number of epochs")
    _config_flag(parser, "seed", "--seed", type=int, help="training seed")
    _config_flag(parser, "lr", "--lr", type=float, help="initial learning rate")
    _config_flag(parser, "batch_size", "--batch-size", type=int, help="samples per step")
    _config_flag(parser, "depth", "--depth", type=int, help="U-Net levels")
    _config_flag(parser, "base_width", "--base-width", type=int, help="channels at the first level")
    _config_flag(parser, "dropout", "--dropout", type=float, help="dropout probability after every block")
    _config_flag(parser, "geometry", "--geometry", help="crop/patch geometry preset (desk or geometry)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_nowcast.py",
        description="Precipitation nowcasting toolkit: synthetic data, U-Net training, prediction and scoring",
    )
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"logging level (default: {default_for('log_level')})")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a deterministic synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="grid preset (default: %(default)s)")
    gen.add_argument("--sequences", type=int, default=None,
                     help="training sequences; validation gets a third as many, at least one (default: preset value)")
    gen.set_defaults(handler=cmd_gen_data)

    fit = sub.add_parser("train", help="train a U-Net and write a checkpoint directory")
    _add_run_flags(fit)
    fit.add_argument("--out", required=True, help="checkpoint directory")
    fit.set_defaults(handler=cmd_train)

    pred = sub.add_parser("predict", help="write one rates file per manifest entry")
    pred.add_argument("--ckpt", required=True, help="checkpoint directory")
    pred.add_argument("--data", required=True, help="split directory with a manifest, or a dataset root (uses val/)")
    pred.add_argument("--out", required=True, help="output directory for NNNN.nwt predictions")
    pred.set_defaults(handler=cmd_predict)

    score = sub.add_parser("score", help="print the CSI/F1 table of predictions against truth")
    score.add_argument("--pred", required=True, help="directory of predicted rate files")
    score.add_argument("--truth", required=True, help="directory of truth rate files, or a split directory with a manifest")
    score.set_defaults(handler=cmd_score)

    grad = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    grad.add_argument("--loss", choices=["dice", "ml_dice"], default=None, help="loss to check (default: both)")
    grad.add_argument("--logcosh", type=_on_off, metavar="{on,off}", default=None, help="logcosh mode (default: both)")
    grad.add_argument("--seed", type=int, default=0, help="first trial seed (default: %(default)s)")
    grad.add_argument("--trials", type=int, default=5, help="seeds per loss check (default: %(default)s)")
    grad.add_argument("--network", type=_on_off, metavar="{on,off}", default=True,
                      help="also check the tiny end-to-end network (default: on)")
    grad.set_defaults(handler=cmd_gradcheck)

    base = sub.add_parser("baseline", help="score persistence and linear-readout forecasts on the validation split")
    base.add_argument("--data", required=True, help="dataset root holding train/ and val/ splits")
    base.add_argument("--kind", choices=["persistence", "linear", "both"], default="both",
                      help="baseline(s) to score (default: %(default)s)")
    base.set_defaults(handler=cmd_baseline)

    ablate = sub.add_parser("ablate", help="train the loss x TFI grid over several seeds and tabulate val mCSI")
    _add_run_flags(ablate)
    ablate.add_argument("--out", required=True, help="TSV file for the ablation table")
    ablate.add_argument("--seeds", type=int, default=3, help="seeds per row, starting at --seed (default: %(default)s)")
    ablate.add_argument("--with-3d", action="store_true", help="add unet3d rows (default: off)")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def _run_config(args: argparse.Namespace, **fixed) -> RunConfig:
    keys = [k for k in RunConfig.model_fields if hasattr(args, k)]
    flags = {k: getattr(args, k) for k in keys}
    flags.update(fixed)
    return resolve_config(flags, args.config)


def _split_dir(path: Path, split: str = "val") -> Path:
    path = Path(path)
    if (path / MANIFEST_NAME).exists():
        return path
    if (path / split / MANIFEST_NAME).exists():
        return path / split
    raise DatasetError(f"no {MANIFEST_NAME} in {path} or {path / split}")


def _fit(run: RunConfig, data: Path):
    info = read_dataset_info(data)
    ucfg = unet_config_for(info.input_frames, info.bands, info.output_frames, DEFAULT_BINS, **run.unet_overrides())
    return train(
        data / "train" / MANIFEST_NAME, data / "val" / MANIFEST_NAME, ucfg, run.train_config(), run.geometry_model(), DEFAULT_BINS
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    overrides: Dict[str, Any] = {"seed": args.seed}
    if args.sequences is not None:
        overrides["train_sequences"] = args.sequences
        overrides["val_sequences"] = max(1, args.sequences // 3)
    cfg = synth_preset(args.preset, **overrides)
    summary = synth_generate(cfg, args.out)
    print(summary.format())
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    configure_logging(args.log_level or run.log_level)
    data = Path(args.data)
    state, history = _fit(run, data)

    out = save_checkpoint(state, args.out, extra={"config": run.model_dump(), "data": str(data)})
    history.write_tsv(out / HISTORY_NAME)
    best = history.record_for(state.epoch)
    if best is None:
        print(f"no epoch improved on the initial validation loss in {len(history)} epochs; saved the initial state")
    else:
        print(f"best epoch {best.epoch} of {len(history)}: val loss {best.val_loss:.5f}, val mCSI {best.val_mcsi:.5f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.ckpt)
    split = _split_dir(Path(args.data))
    entries = read_manifest(split)
    if not entries:
        raise DatasetError(f"manifest in {split} lists no samples")

    store = SequenceStore()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for index, entry in enumerate(entries):
        inputs = input_window(entry, store, state.unet.input_frames)
        try:
            rates = predict(state, inputs, DEFAULT_BINS)
        except GeometryError as e:
            raise GeometryError(
                f"data {split} (satellite frames {inputs.shape[-2]}x{inputs.shape[-1]}, {inputs.shape[1]} bands) "
                f"does not fit checkpoint geometry ({state.geometry.describe() if state.geometry else 'none'}): {e}"
            ) from None
        write_tensor(out / f"{index:04d}{TENSOR_SUFFIX}", rates)
    print(f"wrote {len(entries)} predictions to {out}")
    return 0


def _tensor_files(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    return sorted(directory.glob(f"*{TENSOR_SUFFIX}"))


def cmd_score(args: argparse.Namespace) -> int:
    preds = _tensor_files(Path(args.pred))
    truth_dir = Path(args.truth)
    if (truth_dir / MANIFEST_NAME).exists():
        info = read_dataset_info(truth_dir)
        store = SequenceStore()
        truths = [truth_window(e, store, info.input_frames, info.output_frames) for e in read_manifest(truth_dir)]
    else:
        truths = _tensor_files(truth_dir)
    if len(preds) != len(truths):
        raise CountMismatch(f"{len(preds)} prediction files but {len(truths)} truth samples")
    print(format_score_table(evaluate(preds, truths, DEFAULT_BINS)), end="")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    kinds = [args.loss] if args.loss else ["dice", "ml_dice"]
    modes = [args.logcosh] if args.logcosh is not None else [False, True]
    seeds = range(args.seed, args.seed + args.trials)
    passed = True
    for kind in kinds:
        for use_logcosh in modes:
            cfg = losses.LossConfig(loss_kind=kind, use_logcosh=use_logcosh)
            worst = max(losses.grad_check(cfg, losses.GradCheckTrial(seed=s)) for s in seeds)
            ok = worst < LOSS_TOLERANCE
            passed &= ok
            print(f"{kind:8s} logcosh={_show(use_logcosh):3s} float64  max rel error {worst:.3e}  {'ok' if ok else 'FAIL'}")
    if args.network:
        worst = network_grad_check(NetworkCheckTrial(seed=args.seed), dtype=np.float32)
        ok = worst < NETWORK_TOLERANCE
        passed &= ok
        print(f"network  unet2d       float32  max rel error {worst:.3e}  {'ok' if ok else 'FAIL'}")
    return 0 if passed else 1


def cmd_baseline(args: argparse.Namespace) -> int:
    data = Path(args.data)
    info = read_dataset_info(data)
    val = data / "val" / MANIFEST_NAME
    if args.kind in ("persistence", "both"):
        print("# persistence")
        print(format_score_table(persistence_baseline(val, info.input_frames, info.output_frames)), end="")
    if args.kind in ("linear", "both"):
        report = linear_readout_baseline(data / "train" / MANIFEST_NAME, val, info.input_frames, info.output_frames)
        print("# linear readout")
        print(format_score_table(report), end="")
    return 0


def ablation_table(base: RunConfig, data: Path, seeds: int, archs: Sequence[str]) -> pd.DataFrame:
    """
    Train every (loss, tfi, arch) combination over ``seeds`` consecutive seeds
    from ``base.seed`` and average the validation scores of each run's best epoch.
    Runs where no epoch improved on the initial state contribute NaN.
    """
    rows = []
    for loss in ("ml_dice", "dice"):
        for tfi in (True, False):
            for arch in archs:
                mcsi, mf1 = [], []
                for seed in range(base.seed, base.seed + seeds):
                    run = base.model_copy(update={"loss": loss, "tfi": tfi, "arch": arch, "seed": seed})
                    state, history = _fit(run, data)
                    best = history.record_for(state.epoch)
                    mcsi.append(best.val_mcsi if best else float("nan"))
                    mf1.append(best.val_mf1 if best else float("nan"))
                rows.append([loss, _show(tfi), arch, seeds, float(np.mean(mcsi)), float(np.mean(mf1))])
                logger.info("ablation %s tfi=%s %s: mean val mCSI %.5f", loss, _show(tfi), arch, rows[-1][4])
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def cmd_ablate(args: argparse.Namespace) -> int:
    base = _run_config(args)
    configure_logging(args.log_level or base.log_level)
    archs = ["unet2d", "unet3d"] if args.with_3d else [base.arch]
    table = ablation_table(base, Path(args.data), args.seeds, archs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, sep="\t", index=False, float_format="%.5f", lineterminator="\n")
    print(table.to_csv(sep="\t", index=False, float_format="%.5f", lineterminator="\n"), end="")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command not in ("train", "ablate"):
        configure_logging(args.log_level or default_for("log_level"))

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except CountMismatch as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except (NowcastError, ValidationError, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1
