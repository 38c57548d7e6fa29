"""
Seeding, seed derivation and logging helpers
"""
import hashlib
import logging
from contextlib import contextmanager
from typing import Dict, Iterable, Iterator

import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler

console = Console()

# Every random stream is keyed by (master seed, tag code, counter). Distinct
# tags keep training, validation and evaluation episodes in separate domains.
TAG_CODES: Dict[str, int] = {
    "data": 11,
    "init": 13,
    "pretrain": 17,
    "train": 19,
    "val": 23,
    "eval": 29,
    "mmc": 31,
    "gumbel": 37,
}


def derive_seed(master_seed: int, tag: str, index: int = 0) -> int:
    """
    Derive a 63-bit seed for stream `index` of domain `tag`

    The scheme is SeedSequence([master_seed, TAG_CODES[tag], index]) with the
    first 64-bit word of its generated state masked to 63 bits.
    """
    if tag not in TAG_CODES:
        raise KeyError(f"unknown seed tag '{tag}'")
    sequence = np.random.SeedSequence([int(master_seed), TAG_CODES[tag], int(index)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def episode_rng(master_seed: int, tag: str, index: int) -> np.random.Generator:
    """Numpy generator for one episode of a seeded stream"""
    return np.random.default_rng(derive_seed(master_seed, tag, index))


def torch_generator(seed: int) -> torch.Generator:
    """CPU torch generator seeded with `seed`"""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def set_deterministic(seed: int, enabled: bool = True) -> None:
    """Seed the global torch/numpy state and optionally force deterministic kernels"""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    torch.use_deterministic_algorithms(enabled, warn_only=True)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed global torch seed without leaking it"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def array_digest(*arrays: np.ndarray) -> str:
    """sha256 over the raw bytes of the given arrays"""
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def stream_digest(episode_digests: Iterable[str]) -> str:
    """sha256 over a sequence of episode digests, in consumption order"""
    digest = hashlib.sha256()
    for episode_digest in episode_digests:
        digest.update(episode_digest.encode("ascii"))
    return digest.hexdigest()


def setup_logging(level: str = "INFO") -> None:
    """Route library logging through rich"""
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )
