"""``yoss`` command line: synth, pretrain, finetune, eval, detect.

Exit codes: 0 ok, 2 usage/config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .datamodel import ManifestError, ValidationError

log = logging.getLogger("yoss")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
PRESETS = ("desk-small", "desk-large")


class UsageError(Exception):
    pass


@dataclass
class RunRecipe:
    """A named bundle of corpus, stage-1, stage-2 and evaluation settings."""

    name: str
    corpus: dict[str, Any] = field(default_factory=dict)
    stage1: dict[str, Any] = field(default_factory=dict)
    stage2: dict[str, Any] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, name: str, obj: Mapping[str, Any]) -> "RunRecipe":
        unknown = set(obj) - {"corpus", "stage1", "stage2", "eval"}
        if unknown:
            raise ValidationError(f"{sorted(unknown)[0]}: unknown recipe section")
        return cls(name, *(dict(obj.get(k, {})) for k in ("corpus", "stage1", "stage2", "eval")))

    def corpus_config(self, seed: int | None = None):
        from .synthdata import CorpusConfig

        obj = dict(self.corpus)
        if seed is not None:
            obj["seed"] = seed
        return CorpusConfig.from_mapping(obj)

    def train_config(self, stage: int, seed: int | None = None, **overrides):
        from .trainer import TrainConfig

        obj = dict(self.stage1 if stage == 1 else self.stage2)
        if seed is not None:
            obj["seed"] = seed
        obj.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_mapping(obj, stage=stage)


def load_recipe(spec: str) -> RunRecipe:
    """Resolve ``spec`` as a bundled preset name or a TOML file path."""
    if spec in PRESETS:
        text = resources.files("yoss.presets").joinpath(f"{spec}.toml").read_text()
        name = spec
    else:
        path = Path(spec)
        if not path.is_file():
            raise ValidationError(f"config: no preset or file named {spec!r} (presets: {', '.join(PRESETS)})")
        text = path.read_text()
        name = path.stem
    try:
        obj = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config: invalid TOML ({exc})") from None
    return RunRecipe.from_mapping(name, obj)


def _threads() -> None:
    import torch

    n = os.environ.get("YOSS_NUM_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ValidationError("YOSS_NUM_THREADS: must be an integer") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synthdata import generate_corpus

    cfg = load_recipe(args.config).corpus_config(args.seed)
    out = generate_corpus(cfg, args.out)
    print(out)
    return EXIT_OK


def _save_run(model, mlog, out: Path, name: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{name}.yoss"
    model.save(ckpt)
    mlog.write(out / f"{name}_log.csv")
    return ckpt


def cmd_pretrain(args) -> int:
    from .trainer import YossModel, pretrain_stage1

    recipe = load_recipe(args.config)
    cfg = recipe.train_config(1, args.seed, epochs=args.epochs)
    init = YossModel.load(args.resume) if args.resume else None
    model, mlog = pretrain_stage1(args.data, cfg, init)
    print(_save_run(model, mlog, Path(args.out), "stage1"))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import YossModel, finetune_stage2

    if not args.init:
        raise UsageError("finetune: --init STAGE1_CHECKPOINT is required")
    recipe = load_recipe(args.config)
    cfg = recipe.train_config(2, args.seed, epochs=args.epochs)
    if args.shuffle_labels:
        cfg = replace(cfg, shuffle_labels=True)
    init = args.resume or args.init
    model, mlog = finetune_stage2(args.data, YossModel.load(init), cfg)
    print(_save_run(model, mlog, Path(args.out), "stage2"))
    return EXIT_OK


def _eval_options(args) -> dict:
    opts = load_recipe(args.config).eval if args.config else {}
    return {
        "score_threshold": float(opts.get("score_threshold", 0.05)),
        "max_predictions": int(opts.get("max_predictions", 100)),
    }


def cmd_eval(args) -> int:
    from .datamodel import read_manifest
    from .evalkit import coco_eval, lvis_eval, predict_split, write_report, zero_shot_protocol
    from .grounding import read_predictions, write_predictions
    from .trainer import Stage1Data, YossModel, retrieval_metrics

    opts = _eval_options(args)
    cap = args.max_predictions
    if cap is None:
        cap = 1000 if args.mode == "lvis" else opts["max_predictions"]
    if cap < 1:
        raise ValidationError("max_predictions: must be >= 1")
    if args.checkpoint is None and args.predictions is None:
        raise UsageError("eval: need --checkpoint or --predictions")
    if args.mode == "retrieval" and args.checkpoint is None:
        raise UsageError("eval: retrieval mode needs --checkpoint")
    model = YossModel.load(args.checkpoint) if args.checkpoint else None
    if model is not None and args.mode != "retrieval" and model.head is None:
        raise ValidationError("checkpoint: no detection head (run finetune first)")
    val, vocab = read_manifest(args.data, args.split)
    preds = read_predictions(args.predictions) if args.predictions else None

    extra: dict[str, Any] = {"split": args.split}
    if args.mode == "retrieval":
        data = Stage1Data.from_samples(val, model)
        metrics = retrieval_metrics(model, data, args.fold)
        extra["fold"] = args.fold
        cap = None
    elif args.mode == "zeroshot":
        metrics = zero_shot_protocol(model, args.data, None, opts["score_threshold"], cap, preds).to_json()
    else:
        if preds is None:
            preds = predict_split(model, val, vocab, opts["score_threshold"], max(cap, opts["max_predictions"]))
        res = lvis_eval(preds, val, vocab, cap) if args.mode == "lvis" else coco_eval(preds, val, max_predictions=cap)
        metrics = res.to_json()
        if args.save_predictions:
            write_predictions(args.save_predictions, preds)
    report = write_report(args.out, args.mode, metrics, max_predictions=cap, **extra)
    print(json.dumps(report["metrics"], sort_keys=True))
    return EXIT_OK


def draw_detections(image, detections, labels: Mapping[int, str]):
    """Return a PIL image with one labelled rectangle per detection."""
    from PIL import Image, ImageDraw

    arr = (image.pixels * 255).round().astype("uint8") if hasattr(image, "pixels") else image
    pil = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(pil)
    for d in detections:
        b = d.box
        draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=(255, 255, 0))
        draw.text((b.x1 + 1, b.y1 + 1), f"{labels.get(d.class_id, d.class_id)} {d.score:.2f}", fill=(255, 255, 0))
    return pil


def cmd_detect(args) -> int:
    from .datamodel import atomic_write_bytes, atomic_write_text, read_png, read_wav
    from .encoders import encode_audio
    from .grounding import detect
    from .trainer import YossModel

    model = YossModel.load(args.checkpoint)
    if model.head is None:
        raise ValidationError("checkpoint: no detection head (run finetune first)")
    if not args.audio_prompts:
        raise UsageError("detect: need at least one --audio-prompts WAV")
    image = read_png(args.image)
    clips = [read_wav(p) for p in args.audio_prompts]
    labels = {k: Path(p).stem for k, p in enumerate(args.audio_prompts)}
    emb = encode_audio(clips, model.speech)
    dets = detect(image, emb, model.head, model.image, args.threshold, 0.6, args.max_predictions)

    import io

    buf = io.BytesIO()
    draw_detections(image, dets, labels).save(buf, format="PNG")
    atomic_write_bytes(args.out_image, buf.getvalue())
    lines = [json.dumps({**d.to_json(), "prompt": labels[d.class_id]}, sort_keys=True) for d in dets]
    out_jsonl = args.out or str(Path(args.out_image).with_suffix(".jsonl"))
    atomic_write_text(out_jsonl, "".join(l + "\n" for l in lines))
    print(f"{len(dets)} detections -> {args.out_image}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yoss", description="Audio-grounded detection experiments on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config", default="desk-small", help="preset name or TOML path")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"stage-{1 if name == 'pretrain' else 2} training")
        s.add_argument("--data", required=True)
        s.add_argument("--config", default="desk-small")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--resume", help="start from this checkpoint")
        if name == "finetune":
            s.add_argument("--init", help="stage-1 checkpoint (required)")
            s.add_argument("--shuffle-labels", action="store_true", help="label-shuffled control run")
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", help="compute metrics and write a JSON report")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--mode", choices=("retrieval", "coco", "lvis", "zeroshot"), required=True)
    s.add_argument("--max-predictions", type=int)
    s.add_argument("--predictions", help="score an existing predictions JSONL instead of running the model")
    s.add_argument("--save-predictions")
    s.add_argument("--split", default="val")
    s.add_argument("--fold", type=int, default=50, help="retrieval gallery size")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="metrics JSON path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("detect", help="detect spoken-prompt classes in one image")
    s.add_argument("--image", required=True)
    s.add_argument("--audio-prompts", nargs="+", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-image", required=True)
    s.add_argument("--out", help="detections JSONL (default: next to the image)")
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--max-predictions", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_detect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _threads()
        return args.fn(args)
    except (UsageError, ValidationError, ManifestError) as exc:
        print(f"yoss {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"yoss {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
