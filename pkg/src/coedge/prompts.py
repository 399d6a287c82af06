"""Synthetic prompt sets and the prompt file format.

Prompt files hold one prompt per line as whitespace-separated token ids;
"#" begins a comment. The two bundled sets mirror the short/long prompt
regimes used for benchmarking: "short" draws lengths from 13-43 tokens,
"long" from 200-500.
"""

from __future__ import annotations

import random
from importlib import resources

BUILTIN_SETS = {
    "short": ("prompts_short.txt", (13, 43)),
    "long": ("prompts_long.txt", (200, 500)),
}


def make_prompt_set(
    count: int,
    length_range: tuple[int, int],
    vocab_limit: int = 256,
    seed: int = 0,
) -> list[list[int]]:
    """Uniform-random token-id prompts with lengths in the given range."""
    rng = random.Random(seed)
    lo, hi = length_range
    return [
        [rng.randrange(vocab_limit) for _ in range(rng.randint(lo, hi))]
        for _ in range(count)
    ]


def save_prompt_file(path: str, prompts: list[list[int]], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for prompt in prompts:
            f.write(" ".join(str(t) for t in prompt) + "\n")


def load_prompt_file(path: str) -> list[list[int]]:
    prompts = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            prompts.append([int(tok) for tok in line.split()])
    return prompts


def load_builtin(name: str) -> list[list[int]]:
    filename, _ = BUILTIN_SETS[name]
    text = resources.files("coedge").joinpath("data", filename).read_text(encoding="utf-8")
    prompts = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            prompts.append([int(tok) for tok in line.split()])
    return prompts


def resolve_prompts(source: str) -> list[list[int]]:
    """A builtin set name ("short"/"long") or a prompt file path."""
    if source in BUILTIN_SETS:
        return load_builtin(source)
    return load_prompt_file(source)
