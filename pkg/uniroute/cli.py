"""`uniroute` command line: gen-data, train, generate, eval and bench."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from uniroute import config
from uniroute.bench import (
    BENCH_FILE,
    IMAGES_FILE,
    bench_images,
    bench_pair,
    write_bench,
    write_images,
)
from uniroute.data.dataset import (
    TRAIN_FILE,
    VAL_FILE,
    VOCAB_FILE,
    DatasetFormatError,
    ExampleBuilder,
    Record,
    generate_dataset,
    read_records,
)
from uniroute.data.tokenizer import WordTokenizer
from uniroute.domain.exception import InvalidConfigError, UniRouteError
from uniroute.domain.image import ToyImage
from uniroute.domain.task import Stage, TaskRoute
from uniroute.inference.evaluate import evaluate
from uniroute.inference.generate import generate_image, generate_text
from uniroute.model.network import UniRouteModel
from uniroute.persistence.checkpoint import load_checkpoint
from uniroute.persistence.run_config import RunConfig
from uniroute.training.engine import (
    CHECKPOINT_FILE,
    StageData,
    configure_determinism,
    run_stage,
)
from uniroute.training.merge import merge_branches
from uniroute.utils.casting import bool_from_string, ints_from_string
from uniroute.utils.serializer import json_dumps
from uniroute.utils.time import generate_now

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
EVAL_FILE = "eval.json"
DATA_HELP = "dataset directory, defaults to --out"
MERGED_FILE = "merged.ommx"


def _flag_bool(value: str) -> bool:
    try:
        return bool_from_string(value)
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _flag_ints(value: str) -> List[int]:
    try:
        return ints_from_string(value.replace(",", " "), separator=None)
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument(
        "--strict-determinism",
        type=_flag_bool,
        default=True,
        metavar="BOOL",
        help="deterministic kernels, one thread, wall_ms recorded as 0",
    )

    parser = argparse.ArgumentParser(prog="uniroute")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_data = commands.add_parser(
        "gen-data", parents=[common], help="write toy train/val files"
    )
    gen_data.add_argument("--train-count", type=int, default=4000)
    gen_data.add_argument("--val-count", type=int, default=500)

    train = commands.add_parser(
        "train", parents=[common], help="run one training stage"
    )
    train.add_argument(
        "--stage", required=True, choices=[s.value for s in Stage]
    )
    train.add_argument("--data", help=DATA_HELP)
    train.add_argument("--init", help="checkpoint to start a stage-1 branch")
    train.add_argument("--mmu-checkpoint", help="stage-2 MMU branch")
    train.add_argument("--t2i-checkpoint", help="stage-2 T2I branch")

    generate = commands.add_parser(
        "generate", parents=[common], help="caption a grid or draw one"
    )
    generate.add_argument("--checkpoint", required=True)
    generate.add_argument("--data", help=DATA_HELP)
    source = generate.add_mutually_exclusive_group(required=True)
    source.add_argument("--caption", help="caption to draw")
    source.add_argument(
        "--grid", type=_flag_ints, help="16 color indices to caption"
    )

    evaluate_ = commands.add_parser(
        "eval", parents=[common], help="exact-match accuracy on the val file"
    )
    evaluate_.add_argument("--checkpoint", required=True)
    evaluate_.add_argument("--data", help=DATA_HELP)

    bench = commands.add_parser(
        "bench", parents=[common], help="decode speed and memory benchmark"
    )
    bench.add_argument(
        "--lens", type=_flag_ints, default=[256, 1024, 4096]
    )
    bench.add_argument("--reps", type=int, default=5)
    bench.add_argument("--images", type=int, default=8)
    return parser


def _data_dir(args: argparse.Namespace) -> str:
    return args.data or args.out


def _tokenizer(
    args: argparse.Namespace, model: UniRouteModel
) -> WordTokenizer:
    path = os.path.join(_data_dir(args), VOCAB_FILE)
    if not os.path.isfile(path):
        raise DatasetFormatError(f"{path} doesn't exist; run gen-data")
    tokenizer = WordTokenizer.load(path)
    if len(tokenizer) > model.config.text_vocab_size:
        raise InvalidConfigError(
            f"{len(tokenizer)} words don't fit text_vocab_size "
            f"{model.config.text_vocab_size}"
        )
    return tokenizer


def _load_model(path: str) -> UniRouteModel:
    model = load_checkpoint(path).to_model()
    return model.eval()


def _initial_model(
    args: argparse.Namespace, run: RunConfig, stage: Stage
) -> UniRouteModel:
    if stage is Stage.UNIFIED:
        branches = os.path.join(args.out, "{}", CHECKPOINT_FILE)
        merged = merge_branches(
            args.mmu_checkpoint or branches.format(Stage.MMU.value),
            args.t2i_checkpoint or branches.format(Stage.T2I.value),
            os.path.join(args.out, Stage.UNIFIED.value, MERGED_FILE),
        )
        if merged.config != run.model_config():
            raise InvalidConfigError(
                "stage-1 branches were trained with another model config"
            )
        return merged.to_model()
    model = UniRouteModel(run.model_config())
    if args.init:
        load_checkpoint(args.init).load_into(model)
    return model


def _stage_data(
    stage: Stage, builder: ExampleBuilder, records: Sequence[Record]
) -> StageData:
    mmu = [r for r in records if r.task is TaskRoute.MMU]
    t2i = [r for r in records if r.task is TaskRoute.T2I]
    if stage is Stage.LM:
        return StageData(mmu=[builder.lm(r) for r in mmu])
    if stage is Stage.MMU:
        return StageData(mmu=[builder.mmu(r) for r in mmu])
    if stage is Stage.T2I:
        return StageData(t2i=[builder.t2i(r) for r in t2i])
    return StageData(
        mmu=[builder.mmu(r) for r in mmu], t2i=[builder.t2i(r) for r in t2i]
    )


def cmd_gen_data(args: argparse.Namespace, run: RunConfig) -> None:
    n_train, n_val = generate_dataset(
        args.out, args.seed, args.train_count, args.val_count, run.question
    )
    print(f"{n_train} train and {n_val} val records in {args.out}")


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    stage = Stage(args.stage)
    out_dir = os.path.join(args.out, stage.value)
    os.makedirs(out_dir, exist_ok=True)
    configure_determinism(args.strict_determinism, args.seed)
    model = _initial_model(args, run, stage)
    tokenizer = _tokenizer(args, model)
    builder = ExampleBuilder(
        tokenizer,
        model.encode_image,
        question=run.question,
        max_image_tokens=model.config.max_image_tokens,
        supervise_prompt=run.prompt_loss,
    )
    records = read_records(os.path.join(_data_dir(args), TRAIN_FILE))
    manifest = {
        "started_at": generate_now(),
        "stage": stage,
        "seed": args.seed,
        "strict_determinism": args.strict_determinism,
        "config": run.to_dict(),
    }
    with open(os.path.join(out_dir, RUN_FILE), "w") as stream:
        stream.write(json_dumps(manifest) + "\n")
    result = run_stage(
        model,
        run.stage_config(stage),
        _stage_data(stage, builder, records),
        out_dir,
        run.optimizer_config(),
        seed=args.seed,
        strict=args.strict_determinism,
    )
    print(result.final_checkpoint)


def cmd_generate(args: argparse.Namespace, run: RunConfig) -> None:
    model = _load_model(args.checkpoint)
    tokenizer = _tokenizer(args, model)
    gen = run.generation_config()
    if args.caption is not None:
        image = generate_image(model, tokenizer, args.caption, gen)
        print(" ".join(str(c) for c in image.cells))
        print(image.render())
        return
    image = ToyImage.from_cells(args.grid)
    print(generate_text(model, tokenizer, image, run.question, gen))


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    model = _load_model(args.checkpoint)
    tokenizer = _tokenizer(args, model)
    records = read_records(os.path.join(_data_dir(args), VAL_FILE))
    report = evaluate(
        model, tokenizer, records, run.generation_config(), run.question
    )
    summary = json_dumps(report.summary(), sort_keys=True)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, EVAL_FILE), "w") as stream:
        stream.write(summary + "\n")
    print(summary)


def cmd_bench(args: argparse.Namespace, run: RunConfig) -> None:
    model_config = run.model_config()
    os.makedirs(args.out, exist_ok=True)
    rows = bench_pair(args.lens, args.reps, model_config, args.seed)
    print(write_bench(os.path.join(args.out, BENCH_FILE), rows))
    if args.images:
        results = bench_images(args.images, model_config, args.seed)
        print(write_images(os.path.join(args.out, IMAGES_FILE), results))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    logging.basicConfig(
        level=config.get_log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = RunConfig.load(args.config)
        COMMANDS[args.command](args, run)
    except UniRouteError as error:
        print(f"error: {error.code}: {error.message}", file=sys.stderr)
        return 1
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return 1
    return 0


def run() -> None:
    sys.exit(main())
