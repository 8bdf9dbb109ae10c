"""Command-line surface.

Subcommands::

    canvasgan vse-pretrain [--config PATH] [--seed N] [--out DIR]
    canvasgan train        [--vse DIR] ...
    canvasgan sample       --checkpoint DIR --caption TEXT [--count N] ...
    canvasgan attn-map     --trace JSON [--image PNG] ...
    canvasgan eval         --checkpoint DIR ...

Every subcommand also takes repeatable ``--set key=value`` overrides and
``--log-level``. Precedence is flags > config file > defaults (for
``sample`` and ``eval`` the defaults are the checkpoint's saved config).

Output layout under ``--out``::

    vse/                 visual-semantic checkpoint
    vse_losses.csv
    ckpt_<step>/         GAN checkpoints
    losses.csv
    loss_curves.png
    samples/             sample_000.png + sample_000.json ...
    attention/           attention maps
    eval_report.json
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch
from PIL import Image

from canvasgan.checkpoint import (
    Checkpoint,
    architecture_echo,
    load_checkpoint,
    restore_module,
    save_checkpoint,
)
from canvasgan.config import RunConfig, load_config, save_config, subsystem_seed
from canvasgan.data import (
    Sample,
    from_uint8,
    images_to_tensor,
    load_dataset,
    save_png,
    split_holdout,
    tensor_to_images,
)
from canvasgan.errors import CanvasGANError, ConfigError, ConfigMismatch
from canvasgan.figures import plot_loss_curves, render_attention_map
from canvasgan.generator import CanvasGenerator
from canvasgan.metrics import (
    EvalReport,
    class_grouped_recall,
    inception_score,
    posteriors,
    retrieval_recall,
    train_classifier,
    write_report,
)
from canvasgan.trace import read_trace, trace_records, write_trace
from canvasgan.training import LOSSES_FILE, train
from canvasgan.vse import (
    VisualSemanticEmbedding,
    VSEResult,
    embed_pairs,
    pad_sequences,
    pretrain_vse,
    tokenize,
    tokenize_all,
)

logger = logging.getLogger(__name__)

VSE_DIR = "vse"
VSE_LOSSES_FILE = "vse_losses.csv"
SAMPLES_DIR = "samples"
ATTENTION_DIR = "attention"
REPORT_FILE = "eval_report.json"
CONFIG_ECHO = "run_config.txt"


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config, _overrides(args), base=base)
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _training_split(dataset: list[Sample], cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    return split_holdout(dataset, cfg.data.holdout_fraction, subsystem_seed(cfg.seed, "holdout"))


# ---------------------------------------------------------------------------
# Model restore
# ---------------------------------------------------------------------------

def restore_vse(ckpt: Checkpoint, cfg: RunConfig) -> VSEResult:
    model = VisualSemanticEmbedding(ckpt.vocab.size, cfg.vse, cfg.data.image_size)
    restore_module(model, ckpt.params, "vse")
    return VSEResult(model=model.freeze(), vocab=ckpt.vocab, history=[])


def restore_generator(ckpt: Checkpoint, cfg: RunConfig) -> CanvasGenerator:
    gen = CanvasGenerator(cfg.vse.hidden_dim, cfg.generator)
    restore_module(gen, ckpt.params, "generator")
    return gen.eval()


def _load_for_inference(args: argparse.Namespace) -> tuple[Checkpoint, RunConfig]:
    """Checkpoint plus the run config layered over its saved config."""
    ckpt = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=ckpt.config)
    if architecture_echo(cfg) != architecture_echo(ckpt.config):
        raise ConfigMismatch(f"overrides change the architecture saved in {ckpt.path}")
    return ckpt, cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_vse_pretrain(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(cfg)
    train_set, _ = _training_split(dataset, cfg)
    result = pretrain_vse(train_set, cfg)
    out = _out_dir(cfg)
    pd.DataFrame(result.history, columns=["step", "loss"]).to_csv(
        out / VSE_LOSSES_FILE, index=False, float_format="%.8g"
    )
    save_checkpoint(out / VSE_DIR, {"vse": result.model}, cfg, result.vocab)
    save_config(cfg, out / CONFIG_ECHO)
    logger.info("VSE checkpoint written to %s", out / VSE_DIR)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    vse_path = Path(args.vse) if args.vse else Path(cfg.out_dir) / VSE_DIR
    ckpt = load_checkpoint(vse_path)
    saved, wanted = architecture_echo(ckpt.config), architecture_echo(cfg)
    if (saved["vse"], saved["image_size"]) != (wanted["vse"], wanted["image_size"]):
        raise ConfigMismatch(f"VSE checkpoint {vse_path} was saved with {saved['vse']}, "
                             f"image size {saved['image_size']}")
    vse = restore_vse(ckpt, cfg)
    dataset = load_dataset(cfg)
    train_set, _ = _training_split(dataset, cfg)
    out = _out_dir(cfg)
    losses = out / LOSSES_FILE
    if losses.exists():
        losses.unlink()
    result = train(train_set, vse, cfg, out_dir=out)
    save_config(cfg, out / CONFIG_ECHO)
    if result.records:
        plot_loss_curves(result.losses_frame(), out / "loss_curves.png")
    logger.info("Training finished: %d checkpoints under %s", len(result.checkpoints), out)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    ckpt, cfg = _load_for_inference(args)
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    seq = tokenize(args.caption, ckpt.vocab)
    vse = restore_vse(ckpt, cfg)
    gen = restore_generator(ckpt, cfg)

    indices, lengths = pad_sequences([seq] * args.count)
    rng = torch.Generator().manual_seed(subsystem_seed(cfg.seed, "sample"))
    with torch.no_grad():
        enc = vse.model.encode_captions(indices, lengths)
        result = gen.paint(enc.per_token, enc.sentence, enc.mask, rng=rng)
    images = tensor_to_images(result.image)

    out = _out_dir(cfg) / SAMPLES_DIR
    for i in range(args.count):
        png = save_png(images[i], out / f"sample_{i:03d}.png")
        write_trace(out / f"sample_{i:03d}.json", trace_records(result, seq.raw_tokens, i),
                    caption=args.caption, image=png.name)
    logger.info("Wrote %d samples to %s", args.count, out)
    return 0


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def _trace_image(trace_path: Path, image_name: str | None) -> np.ndarray | None:
    if not image_name:
        return None
    p = trace_path.parent / image_name
    return _read_image(p) if p.is_file() else None


def cmd_attention_map(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    trace_path = Path(args.trace)
    doc = read_trace(trace_path)
    image = _read_image(Path(args.image)) if args.image else _trace_image(trace_path, doc.image)
    out = _out_dir(cfg) / ATTENTION_DIR / f"{trace_path.stem}_attention.png"
    matrix = render_attention_map(doc.steps, out, image=image, title=doc.caption or "")
    logger.info("Attention map (%d x %d) written to %s", *matrix.shape, out)
    return 0


def _eval_recall(vse: VSEResult, held: list[Sample], cfg: RunConfig) -> dict[int, float]:
    indices, lengths = tokenize_all([s.caption for s in held], vse.vocab)
    img, sent = embed_pairs(vse.model, images_to_tensor(held), indices, lengths)
    ks = cfg.metrics.recall_ks
    if all(s.class_id is not None for s in held) and len({s.class_id for s in held}) >= 2:
        return class_grouped_recall(img, sent, [s.class_id for s in held], ks,
                                    cfg.metrics.recall_rounds, subsystem_seed(cfg.seed, "recall"))
    return {k: retrieval_recall(img, sent, min(k, len(held))) for k in ks}


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt, cfg = _load_for_inference(args)
    m = cfg.metrics
    if m.num_samples < m.splits:
        logger.error("eval needs num_samples >= splits (got %d < %d)", m.num_samples, m.splits)
        return 1
    dataset = load_dataset(cfg)
    if any(s.class_id is None for s in dataset):
        raise ConfigError("eval needs class-labelled data to train the scoring classifier")
    train_set, held = _training_split(dataset, cfg)
    if len(held) < 2:
        held = dataset

    vse = restore_vse(ckpt, cfg)
    gen = restore_generator(ckpt, cfg)
    classifier = train_classifier(images_to_tensor(train_set), [s.class_id for s in train_set],
                                  m, seed=subsystem_seed(cfg.seed, "classifier"))

    pick = np.random.default_rng(subsystem_seed(cfg.seed, "eval")).integers(len(dataset), size=m.num_samples)
    indices, lengths = tokenize_all([dataset[i].caption for i in pick], vse.vocab)
    rng = torch.Generator().manual_seed(subsystem_seed(cfg.seed, "eval-noise"))
    painted = []
    with torch.no_grad():
        for start in range(0, m.num_samples, 256):
            sl = slice(start, start + 256)
            enc = vse.model.encode_captions(indices[sl], lengths[sl])
            painted.append(gen.paint(enc.per_token, enc.sentence, enc.mask, rng=rng).image)
    mean, std = inception_score(posteriors(classifier.model, torch.cat(painted)), m.splits)

    report = EvalReport(inception_mean=mean, inception_std=std, recall_at=_eval_recall(vse, held, cfg))
    path = write_report(report, _out_dir(cfg) / REPORT_FILE)
    logger.info("Inception score %.3f ± %.3f; recall %s -> %s", mean, std, report.recall_at, path)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "vse-pretrain": cmd_vse_pretrain,
    "train": cmd_train,
    "sample": cmd_sample,
    "attn-map": cmd_attention_map,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    ap = argparse.ArgumentParser(prog="canvasgan", description="Recurrent canvas text-to-image GAN")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("vse-pretrain", parents=[common], help="pretrain the visual-semantic text encoder")
    p = sub.add_parser("train", parents=[common], help="adversarial training")
    p.add_argument("--vse", type=str, default=None, help="VSE checkpoint dir (default: <out>/vse)")
    p = sub.add_parser("sample", parents=[common], help="paint images from a caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--count", type=int, default=1)
    p = sub.add_parser("attn-map", parents=[common], help="render a paint trace as a heat map")
    p.add_argument("--trace", required=True)
    p.add_argument("--image", type=str, default=None, help="image shown beside the map")
    p = sub.add_parser("eval", parents=[common], help="inception score and retrieval recall")
    p.add_argument("--checkpoint", required=True)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (CanvasGANError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
