"""Decode speed and memory of the state space model against the matched
attention baseline.

Memory is read from the decode-state data structures, never from the
process, so the byte columns are exact and machine independent.
"""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import astuple, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import torch

from uniroute.data.sequence import t2i_prompt
from uniroute.domain.exception import UniRouteError
from uniroute.domain.generation import GenerationConfig
from uniroute.domain.model_config import ModelConfig
from uniroute.domain.task import TaskRoute
from uniroute.domain.token import Expected, Modality, Token, modality_code
from uniroute.inference.generate import decode_image
from uniroute.inference.session import DecodeSession
from uniroute.model.attention import AttentionBackbone, AttnConfig
from uniroute.model.network import UniRouteModel

logger = logging.getLogger(__name__)

BENCH_FILE = "bench.tsv"
IMAGES_FILE = "images.tsv"
BENCH_COLUMNS = (
    "len",
    "ssm_tok_per_s",
    "attn_tok_per_s",
    "ssm_state_bytes",
    "attn_cache_bytes",
    "attn_cache_alloc_bytes",
)
IMAGES_COLUMNS = ("model", "images", "seconds", "images_per_s")
MIN_REPS = 5
WARMUP_REPS = 2
MAX_INNER_STEPS = 64
# A timed rep must span this many clock ticks.
TIMER_TICKS = 100


@dataclass(frozen=True)
class BenchRow:
    seq_len: int
    ssm_tok_per_s: float
    attn_tok_per_s: float
    ssm_state_bytes: int
    attn_cache_bytes: int
    attn_cache_alloc_bytes: int


@dataclass(frozen=True)
class ImageThroughput:
    model: str
    images: int
    seconds: float

    @property
    def images_per_s(self) -> float:
        return self.images / self.seconds if self.seconds else 0.0


def matched_models(
    config: Optional[ModelConfig] = None, seed: int = 0
) -> Tuple[UniRouteModel, UniRouteModel]:
    """The state space model and an attention model of matched size that
    shares its embeddings, heads and formats."""
    config = config or ModelConfig()
    torch.manual_seed(seed)
    ssm = UniRouteModel(config)
    attn_config = AttnConfig.matched(config)
    attn = UniRouteModel(config, AttentionBackbone(attn_config))
    logger.info(
        "Backbones: ssm %s params, attention %s params",
        ssm.backbone.base_parameter_count(),
        attn.backbone.base_parameter_count(),
    )
    return ssm.eval(), attn.eval()


@torch.no_grad()
def positioned_session(
    model: UniRouteModel, length: int, seed: int = 0
) -> DecodeSession:
    """A session that has already consumed `length` random text tokens."""
    generator = torch.Generator().manual_seed(seed)
    ids = torch.randint(
        model.config.text_vocab_size, (1, length), generator=generator
    )
    kinds = torch.full_like(ids, modality_code(Modality.TEXT))
    out, state = model.backbone.prefill(
        model.embed(kinds, ids), TaskRoute.T2I
    )
    return DecodeSession(
        model=model,
        route=TaskRoute.T2I,
        state=state,
        hidden=out[:, -1],
        position=length,
        config=GenerationConfig(),
        generator=generator,
    )


def _decode_once(session: DecodeSession) -> None:
    token = session.model.vocab.decode_constrained(
        session.hidden,
        Expected.IMAGE_OR_EOI,
        session.config,
        session.generator,
        allow_terminal=False,
    )
    session.feed(token)


@torch.no_grad()
def time_per_token(session: DecodeSession, reps: int = MIN_REPS) -> float:
    """Median nanoseconds of one decode step, over at least MIN_REPS reps
    after WARMUP_REPS untimed ones.

    When a rep is too short for the clock, each rep times a growing run of
    steps instead of one.
    """
    reps = max(reps, MIN_REPS)
    for _ in range(WARMUP_REPS):
        _decode_once(session)
    resolution = time.get_clock_info("perf_counter").resolution
    floor_ns = resolution * 1e9 * TIMER_TICKS
    inner = 1
    while True:
        samples = []
        for _ in range(reps):
            started = time.perf_counter_ns()
            for _ in range(inner):
                _decode_once(session)
            samples.append((time.perf_counter_ns() - started) / inner)
        if min(samples) * inner >= floor_ns or inner >= MAX_INNER_STEPS:
            return statistics.median(samples)
        inner *= 2
        logger.warning(
            "Timer too coarse at %s ns per step, timing %s steps per rep",
            min(samples),
            inner,
        )


def bench_pair(
    seq_lens: Sequence[int],
    reps: int = MIN_REPS,
    config: Optional[ModelConfig] = None,
    seed: int = 0,
) -> List[BenchRow]:
    """Per-token decode throughput and decode-state bytes at each prefix
    length, for both models. Runs on one thread."""
    if not seq_lens or any(length <= 0 for length in seq_lens):
        raise BenchConfigError("sequence lengths must be positive")
    torch.set_num_threads(1)
    ssm, attn = matched_models(config, seed)
    rows = []
    for length in sorted(set(seq_lens)):
        ssm_session = positioned_session(ssm, length, seed)
        attn_session = positioned_session(attn, length, seed)
        ssm_bytes, attn_bytes = ssm_session.nbytes, attn_session.nbytes
        ssm_ns = time_per_token(ssm_session, reps)
        attn_ns = time_per_token(attn_session, reps)
        rows.append(
            BenchRow(
                seq_len=length,
                ssm_tok_per_s=1e9 / ssm_ns,
                attn_tok_per_s=1e9 / attn_ns,
                ssm_state_bytes=ssm_bytes,
                attn_cache_bytes=attn_bytes,
                attn_cache_alloc_bytes=attn_session.allocated_nbytes,
            )
        )
        logger.info(
            "len %s: ssm %.1f tok/s, attention %.1f tok/s",
            length,
            rows[-1].ssm_tok_per_s,
            rows[-1].attn_tok_per_s,
        )
    return rows


def bench_images(
    images: int,
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    caption_len: int = 5,
) -> List[ImageThroughput]:
    """Wall time to generate `images` full token grids with each model."""
    if images <= 0:
        raise BenchConfigError("image count must be positive")
    torch.set_num_threads(1)
    ssm, attn = matched_models(config, seed)
    caption = [Token.text(i) for i in range(caption_len)]
    prompt = t2i_prompt(caption)
    results = []
    for name, model in (("ssm", ssm), ("attention", attn)):
        decode_image(model, prompt)
        started = time.perf_counter_ns()
        for _ in range(images):
            decode_image(model, prompt)
        seconds = (time.perf_counter_ns() - started) / 1e9
        results.append(ImageThroughput(name, images, seconds))
    return results


def write_table(
    path: str, columns: Sequence[str], rows: Iterable[Sequence]
) -> str:
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def write_bench(path: str, rows: Iterable[BenchRow]) -> str:
    return write_table(path, BENCH_COLUMNS, (astuple(row) for row in rows))


def write_images(path: str, results: Iterable[ImageThroughput]) -> str:
    return write_table(
        path,
        IMAGES_COLUMNS,
        (
            (r.model, r.images, r.seconds, r.images_per_s)
            for r in results
        ),
    )


class BenchConfigError(UniRouteError):
    def __init__(self, message: str) -> None:
        super().__init__(message, "BENCH_CONFIG_ERROR")
