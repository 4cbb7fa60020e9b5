"""Versioned prompt templates shipped as package text assets."""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .reflection import DEFAULT_VOCAB, PASSAGE_CLOSE, PASSAGE_OPEN, Variant, Vocabulary

TEMPLATES = {
    "multihop": "multihop_v1.txt",
    "singlehop": "singlehop_v1.txt",
    "critic": "critic_v1.txt",
}


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    try:
        fname = TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None
    return resources.files("reflectrag.templates").joinpath(fname).read_text(encoding="utf-8")


def template_version(name: str) -> str:
    return TEMPLATES[name].rsplit(".", 1)[0]


def render(name: str, **fields) -> str:
    return load_template(name).format(**fields)


def passage_block(passages) -> str:
    """Passages of one hop bundle joined by newlines inside the delimiters."""
    return PASSAGE_OPEN + "\n".join(passages) + PASSAGE_CLOSE


def retrieval_prompt(base_prompt: str, passages, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    return base_prompt + vocab.surface(Variant.RT) + passage_block(passages)
