# vslan/cli.py
"""
Command-line entry point: ``python -m vslan <command>``.

Structured results go to stdout as JSON; logs go to stderr. Exit codes:
0 ok, 2 config, 3 data, 4 numeric abort, 5 reward service, 1 anything else.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from vslan.core.config import load_run_config, run_config_schema, settings
from vslan.core.exceptions import ConfigError, DataError, VslanError
from vslan.models.data import PredictionRecord
from vslan.utils.logging import configure_logging

logger = logging.getLogger("vslan.cli")


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_config(args):
    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


def cmd_gen_data(args) -> int:
    from vslan.services.synthetic import gen_synthetic

    config = _load_config(args)
    synthetic = config.synthetic
    if args.seed is not None:
        synthetic = synthetic.model_copy(update={"seed": args.seed})
    _emit(gen_synthetic(synthetic, args.out or config.paths.data_dir))
    return 0


def cmd_train(args) -> int:
    from vslan.services.dataset import load_dataset
    from vslan.services.trainer import train

    config = _load_config(args)
    dataset = load_dataset(config.paths.data_dir)
    result = train(dataset, config)
    _emit({
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
        "epochs": len(result.logs),
        "final": result.logs[-1].model_dump(exclude={"wall_s"}) if result.logs else None,
    })
    return 0


def _restore(args):
    from vslan.services.checkpoint import restore_model
    from vslan.services.dataset import load_dataset
    from vslan.services.network import encode

    model, ckpt = restore_model(args.checkpoint)
    data_dir = args.data_dir or ckpt.meta.config.get("paths", {}).get("data_dir")
    if not data_dir:
        raise ConfigError("no data directory: pass --data-dir")
    dataset = load_dataset(data_dir)
    if len(dataset.vocab) != model.spec.vocab_size:
        raise DataError(f"vocabulary in {data_dir} has {len(dataset.vocab)} tokens, model expects {model.spec.vocab_size}")
    video = dataset.video(args.video_id)
    enc = encode(model, [s.clips for s in video.streams])
    return model, ckpt, dataset, enc


def cmd_caption(args) -> int:
    from vslan.services.decoder import beam_decode
    from vslan.services.network import inference_g_bar

    model, ckpt, dataset, enc = _restore(args)
    max_len = args.max_len or ckpt.meta.config.get("max_len", 25)
    g_bar = inference_g_bar(model, enc.g_tilde, args.seed or 0, max_len)
    hyps = beam_decode(enc, g_bar, model.decoder, width=args.beam, max_len=max_len)
    _emit({
        "video_id": args.video_id,
        "caption": dataset.vocab.decode(hyps[0].tokens),
        "hypotheses": [
            {"caption": dataset.vocab.decode(h.tokens), "log_prob": h.log_prob, "score": h.score}
            for h in hyps
        ],
    })
    return 0


def cmd_sample_diverse(args) -> int:
    from vslan.services.decoder import diverse_decode

    model, ckpt, dataset, enc = _restore(args)
    max_len = args.max_len or ckpt.meta.config.get("max_len", 25)
    width = args.beam or ckpt.meta.config.get("beam_width", 5)
    samples = diverse_decode(enc, model.decoder, model.require_vapen(), n_samples=args.n,
                             seed=args.seed or 0, width=width, max_len=max_len)
    _emit({
        "video_id": args.video_id,
        "samples": [
            {"caption": dataset.vocab.decode(tokens), "pos": dataset.tagset.decode(pos)}
            for tokens, pos in samples
        ],
    })
    return 0


def cmd_evaluate(args) -> int:
    from vslan.services.metrics import evaluate_predictions

    path = Path(args.predictions)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise DataError(f"predictions file not found: {path}") from e
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(PredictionRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid prediction record: {e}") from e
    _emit(evaluate_predictions(records))
    return 0


def cmd_mock_scorer(args) -> int:
    from vslan.main import serve

    serve(port=args.port)
    return 0


def cmd_schema(args) -> int:
    sys.stdout.write(run_config_schema() + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vslan", description="Stacked local attention video captioner")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the random seed")
    common.add_argument("--log-level", default=None, help="Log level for stderr output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="Output directory (default: paths.data_dir)")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Train and write checkpoints")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (
        ("caption", cmd_caption, "Beam-decode one video"),
        ("sample-diverse", cmd_sample_diverse, "Sample diverse captions through POS rollouts"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--video-id", required=True)
        p.add_argument("--data-dir", default=None)
        p.add_argument("--max-len", type=int, default=None)
        p.set_defaults(handler=handler)
        if name == "caption":
            p.add_argument("--beam", type=int, default=5)
        else:
            p.add_argument("--n", type=int, default=10)
            p.add_argument("--beam", type=int, default=None)

    p = sub.add_parser("evaluate", parents=[common], help="Score a predictions file")
    p.add_argument("--predictions", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("mock-scorer", parents=[common], help="Serve the mock entailment scorer")
    p.add_argument("--port", type=int, default=settings.SCORER_PORT)
    p.set_defaults(handler=cmd_mock_scorer)

    p = sub.add_parser("schema", parents=[common], help="Print the run configuration JSON schema")
    p.set_defaults(handler=cmd_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except VslanError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
