"""Command-line pipeline: synthetic data, distillation, MOS training, prediction, evaluation.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import shutil
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import nncore as nn
from .data import WaveCache, load_manifest, synth_dataset
from .metrics import ScorePair, evaluate_all, write_report
from .models import ConvEncoder, EncoderConfig, MosHead, SfiEncoder, predict_mos
from .signal import PIPELINE_RATES, read_wav
from .training import TrainConfig, cv_split, kd_train, mos_train

log = logging.getLogger("sfimos")

CONFIG_NAME = "config.txt"
DISTILL_CKPT = "distill.ckpt"
MODEL_CKPT = "model.ckpt"
OOF_NAME = "oof_predictions.csv"


class UsageError(Exception):
    """Bad arguments, configuration or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass(frozen=True)
class RunConfig:
    # optimisation, mirrors TrainConfig
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kd_batch: int = 32
    pretrain_batch: int = 64
    final_batch: int = 24
    epochs: int = 50
    kd_epochs: int = 10
    folds: int = 7
    seed: int = 0
    crop_s: float = 1.0
    freeze_encoder: bool = False
    # model dimensions
    channels: int = 64
    trunk: str = "3:2,3:2,3:2"
    n_rff: int = 64
    rff_scale: float = 10.0
    naf_hidden: int = 256
    # distillation extras
    kd_max_steps: int = 0
    kd_utterances: int = 0
    # paths; empty means unused
    teacher: str = ""
    pretrain_manifest: str = ""

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def encoder_config(self) -> EncoderConfig:
        try:
            trunk = tuple(tuple(int(v) for v in item.split(":")) for item in self.trunk.split(","))
        except ValueError:
            raise UsageError(f"trunk must look like 3:2,3:2 (kernel:stride), got {self.trunk!r}") from None
        if any(len(t) != 2 or min(t) < 1 for t in trunk):
            raise UsageError(f"bad trunk layer in {self.trunk!r}")
        return EncoderConfig(channels=self.channels, trunk=trunk, n_rff=self.n_rff,
                             rff_scale=self.rff_scale, naf_hidden=self.naf_hidden)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in dataclasses.asdict(self).items())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: {"bool": bool, "int": int, "float": float, "str": str}[f.type]
                for f in dataclasses.fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise UsageError(f"{source}:{line_no}: unknown config key {key!r}")
        out[key] = _parse_value(key, value, _FIELD_TYPES[key])
    return out


def resolve_config(base: dict | None = None, path=None, overrides=(), **flags) -> RunConfig:
    """Defaults, then ``base``, then the file at ``path``, then ``--set`` and explicit flags."""
    values = dict(base or {})
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    if overrides:
        values.update(parse_config_text("\n".join(overrides), "--set"))
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig(**values)
    try:
        cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg.encoder_config()
    return cfg


def _write_config(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / CONFIG_NAME).write_text(cfg.dumps())


def _read_run_config(run_dir: Path) -> dict:
    p = run_dir / CONFIG_NAME
    return parse_config_text(p.read_text(), str(p)) if p.is_file() else {}


# ---------------------------------------------------------------------------
# helpers


def _manifest_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.csv"
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    return p


def _load_records(path: Path):
    try:
        return load_manifest(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_loss_csv(path: Path, rows, append: bool = False) -> None:
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train, val in rows:
            writer.writerow([epoch, repr(float(train)), "" if val is None else repr(float(val))])


def _with_prefix(arrays: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in arrays.items()}


def _load_ckpt(path: Path, what: str) -> dict:
    if not path.is_file():
        raise UsageError(f"{what} checkpoint not found: {path}")
    try:
        return nn.load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_listeners(spec: str | None, n: int) -> list[int]:
    if spec is None:
        return list(range(n))
    ids: list[int] = []
    try:
        for part in spec.split(","):
            if ".." in part:
                lo, hi = part.split("..")
                ids.extend(range(int(lo), int(hi) + 1))
            else:
                ids.append(int(part))
    except ValueError:
        raise UsageError(f"bad listener list {spec!r}; use e.g. 0..9 or 0,3,5") from None
    if not ids or min(ids) < 0 or max(ids) >= n:
        raise UsageError(f"listener ids must lie in 0..{n - 1}")
    return ids


def load_fold_models(models_dir) -> tuple[RunConfig, list[tuple[SfiEncoder, MosHead]]]:
    models_dir = Path(models_dir)
    paths = sorted(models_dir.glob(f"fold*/{MODEL_CKPT}"))
    if not paths:
        raise UsageError(f"no fold checkpoints under {models_dir}")
    cfg = resolve_config(_read_run_config(models_dir))
    models = []
    for p in paths:
        arrays = nn.load_checkpoint(p)
        encoder = SfiEncoder(cfg.encoder_config())
        encoder.load_state(arrays, "student/")
        head = MosHead(arrays["head/listener"].shape[0], dim=cfg.channels)
        head.load_state(arrays, "head/")
        models.append((encoder, head))
    return cfg, models


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    ds = synth_dataset(out, seed=args.seed, duration_s=args.duration)
    print(f"wrote {ds.n_utterances} utterances, {ds.n_ratings} ratings to {ds.manifest}")
    return 0


def cmd_distill(args) -> int:
    out = Path(args.out)
    manifest = _manifest_path(args.data)
    ckpt_path = out / DISTILL_CKPT
    if args.resume and not ckpt_path.is_file():
        raise UsageError(f"--resume given but {ckpt_path} does not exist")
    if not args.resume and ckpt_path.exists():
        raise UsageError(f"{ckpt_path} exists; pass --resume to continue it")
    base = _read_run_config(out) if args.resume else {}
    cfg = resolve_config(base, args.config, args.set, seed=args.seed,
                         teacher=args.teacher, kd_epochs=args.epochs)
    enc_cfg = cfg.encoder_config()

    teacher = ConvEncoder(enc_cfg, seed=cfg.seed)
    student = SfiEncoder.from_teacher(teacher, seed=cfg.seed + 1)
    done_epochs, done_steps = 0, 0
    if args.resume:
        state = _load_ckpt(ckpt_path, "distillation")
        teacher.load_state(state, "teacher/")
        student.load_state(state, "student/")
        student.load_optimizer_state(state, "opt/student/")
        done_epochs, done_steps = int(state["meta/epochs"]), int(state["meta/steps"])
    elif cfg.teacher:
        state = _load_ckpt(Path(cfg.teacher), "teacher")
        try:
            teacher.load_state(state, "teacher/")
        except (KeyError, ValueError) as exc:
            raise UsageError(f"teacher checkpoint {cfg.teacher} does not match the model config: {exc}") from None
        student = SfiEncoder.from_teacher(teacher, seed=cfg.seed + 1)

    records = _load_records(manifest)
    load = WaveCache(manifest.parent)
    paths = list(OrderedDict.fromkeys(r.wav_path for r in records))
    if cfg.kd_utterances:
        paths = paths[: cfg.kd_utterances]
    corpus = [load(p) for p in paths]

    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    remaining = cfg.kd_epochs - done_epochs
    max_steps = None
    if cfg.kd_max_steps:
        max_steps = max(cfg.kd_max_steps - done_steps, 0)
    if remaining <= 0 or max_steps == 0:
        print(f"nothing to do: {done_epochs} epochs, {done_steps} steps already done")
        return 0

    loss_csv = out / "loss.csv"
    if not args.resume:
        _write_loss_csv(loss_csv, [])

    def on_epoch(epoch: int, loss: float, steps: int) -> None:
        # checkpoint after every epoch so --resume can pick up from here
        _write_loss_csv(loss_csv, [(epoch + 1, loss, None)], append=True)
        arrays = _with_prefix(teacher.state(), "teacher/")
        arrays.update(_with_prefix(student.state(), "student/"))
        arrays.update(student.optimizer_state("opt/student/"))
        arrays["meta/epochs"] = np.array(float(epoch + 1))
        arrays["meta/steps"] = np.array(float(done_steps + steps))
        nn.save_checkpoint(ckpt_path, arrays)

    result = kd_train(corpus, teacher, student, cfg.train_config(), epochs=remaining,
                      max_steps=max_steps, start_epoch=done_epochs, on_epoch=on_epoch)
    print(f"distilled {done_epochs + len(result.epoch_losses)} epochs, "
          f"{done_steps + result.steps} steps; checkpoint {ckpt_path}")
    return 0


def cmd_train_mos(args) -> int:
    manifest = _manifest_path(args.data)
    init_path = Path(args.init)
    init = _load_ckpt(init_path, "initial")
    base = _read_run_config(init_path.parent)
    cfg = resolve_config(base, args.config, args.set, seed=args.seed, folds=args.folds)
    records = _load_records(manifest)
    try:
        folds = cv_split(records, cfg.folds, seed=cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    n_listeners = max(r.listener_id for r in records) + 1
    load = WaveCache(manifest.parent)
    enc_cfg = cfg.encoder_config()
    train_cfg = cfg.train_config()

    def fresh_encoder() -> SfiEncoder:
        enc = SfiEncoder(enc_cfg)
        try:
            enc.load_state(init, "student/")
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{init_path} does not hold a matching student: {exc}") from None
        return enc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)

    start_state = None
    if cfg.pretrain_manifest:
        pre_path = _manifest_path(cfg.pretrain_manifest)
        pre_records = _load_records(pre_path)
        enc = fresh_encoder()
        head = MosHead(max(n_listeners, max(r.listener_id for r in pre_records) + 1), dim=cfg.channels, seed=cfg.seed)
        res = mos_train(pre_records, enc, head, train_cfg, WaveCache(pre_path.parent),
                        batch_size=cfg.pretrain_batch)
        _write_loss_csv(out / "pretrain_loss.csv", [(e, t, v) for e, t, v in res.history])
        start_state = res.best_state
        n_listeners = head.num_listeners

    oof: dict[str, float] = {}
    for f, (train, val) in enumerate(folds):
        encoder = fresh_encoder()
        head = MosHead(n_listeners, dim=cfg.channels, seed=cfg.seed + 1000 + f)
        if start_state is not None:
            encoder.load_state(start_state, "encoder/")
            head.load_state(start_state, "head/")
        fold_dir = out / f"fold{f}"
        fold_dir.mkdir(exist_ok=True)
        res = mos_train(train, encoder, head, train_cfg, load, val_records=val)
        _write_loss_csv(fold_dir / "loss.csv", res.history)
        encoder.load_state(res.best_state, "encoder/")
        head.load_state(res.best_state, "head/")
        arrays = _with_prefix(encoder.state(), "student/")
        arrays.update(_with_prefix(head.state(), "head/"))
        arrays["meta/best_epoch"] = np.array(float(res.best_epoch))
        nn.save_checkpoint(fold_dir / MODEL_CKPT, arrays)
        ids = range(n_listeners)
        for path in OrderedDict.fromkeys(r.wav_path for r in val):
            oof[path] = predict_mos(load(path), [(encoder, head)], ids)
        log.info("fold %d: best epoch %d", f, res.best_epoch)

    with open(out / OOF_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "pred"])
        for path in OrderedDict.fromkeys(r.wav_path for r in records):
            writer.writerow([path, repr(oof[path])])
    print(f"trained {len(folds)} folds; models in {out}")
    return 0


def cmd_predict(args) -> int:
    _, models = load_fold_models(args.models)
    try:
        w = read_wav(args.wav)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if w.sample_rate_hz not in PIPELINE_RATES:
        raise UsageError(f"unsupported sampling rate {w.sample_rate_hz} Hz; expected one of {PIPELINE_RATES}")
    n_listeners = min(head.num_listeners for _, head in models)
    ids = _parse_listeners(args.listeners, n_listeners)
    pred = predict_mos(w, models, ids, detail=True)
    if args.verbose:
        for k, v in enumerate(pred.per_model):
            print(f"fold{k}: {v:.6f}")
    print(f"{pred.mos:.6f}")
    return 0


def read_predictions(path) -> dict[str, float]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"predictions file not found: {p}")
    out: dict[str, float] = {}
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"utterance_id", "pred"} <= set(reader.fieldnames or []):
            raise UsageError(f"{p}: header must contain utterance_id,pred")
        for row_no, row in enumerate(reader, start=2):
            try:
                out[row["utterance_id"]] = float(row["pred"])
            except ValueError:
                raise UsageError(f"{p}, row {row_no}: bad prediction {row['pred']!r}") from None
    return out


def join_predictions(records, preds: dict[str, float]) -> list[ScorePair]:
    """Pair each utterance's listener-mean score with its prediction."""
    truth: OrderedDict[str, list[float]] = OrderedDict()
    system: dict[str, str] = {}
    for r in records:
        truth.setdefault(r.wav_path, []).append(r.score)
        system[r.wav_path] = r.system_id
    unmatched = sorted(set(preds) ^ set(truth))
    if unmatched:
        raise RuntimeError("unmatched utterance ids: " + ", ".join(unmatched))
    return [ScorePair(float(np.mean(s)), preds[u], u, system[u]) for u, s in truth.items()]


def cmd_evaluate(args) -> int:
    records = _load_records(_manifest_path(args.manifest))
    pairs = join_predictions(records, read_predictions(args.pred))
    report = evaluate_all(pairs)
    for level, values in report.items():
        for name, value in values.items():
            print(f"{level}.{name}={value!r}")
    if args.out:
        write_report(report, args.out)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfimos", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level for progress messages")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write the synthetic track-shaped rating corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=float, default=0.5, help="utterance length in seconds")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_synthetic)

    def add_config_flags(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int)

    d = sub.add_parser("distill", help="distil the fixed-rate teacher into the SFI student")
    d.add_argument("--data", required=True, help="dataset directory or manifest CSV")
    d.add_argument("--out", required=True)
    d.add_argument("--teacher", help="checkpoint holding teacher/ parameters")
    d.add_argument("--epochs", type=int, help="total distillation epochs (overrides kd_epochs)")
    d.add_argument("--resume", action="store_true", help="continue from OUT/distill.ckpt")
    add_config_flags(d)
    d.set_defaults(func=cmd_distill)

    t = sub.add_parser("train-mos", help="cross-validated MOS training from a distilled student")
    t.add_argument("--data", required=True, help="manifest CSV or dataset directory")
    t.add_argument("--init", required=True, help="distillation checkpoint")
    t.add_argument("--folds", type=int)
    t.add_argument("--out", required=True)
    add_config_flags(t)
    t.set_defaults(func=cmd_train_mos)

    p = sub.add_parser("predict", help="predict the MOS of one WAV file")
    p.add_argument("--models", required=True, help="train-mos output directory")
    p.add_argument("--wav", required=True)
    p.add_argument("--listeners", help="listener ids, e.g. 0..9 or 0,2,5 (default: all)")
    p.add_argument("--verbose", action="store_true", help="print each fold model's score too")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score a predictions CSV against a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", help="directory for report.txt and report.csv")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sfimos {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  (any other failure is a runtime error)
        print(f"sfimos {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
