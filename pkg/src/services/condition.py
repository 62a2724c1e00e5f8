"""Prompt embedding and the classifier-free guidance rule."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import nn

from src.services.errors import MusicEditorError

logger = logging.getLogger(__name__)


class ConditionError(MusicEditorError):
    default_stage = "condition"


class VocabularyError(ConditionError):
    """Prompt contains words the vocabulary does not know."""


@dataclass(frozen=True)
class TokenSpan:
    word: str
    start: int
    stop: int


@dataclass(frozen=True)
class PromptEmbedding:
    """M x d_tau rows, one per prompt token (the null row for an empty prompt)."""

    text: str
    rows: torch.Tensor
    token_spans: Tuple[TokenSpan, ...]

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def is_null(self) -> bool:
        return not self.text.strip()

    def span_of(self, word: str) -> TokenSpan:
        """Row range of ``word``.

        Raises:
            VocabularyError: If the prompt does not contain ``word``
        """
        for span in self.token_spans:
            if span.word == word:
                return span
        raise VocabularyError(f"keyword '{word}' is not in prompt '{self.text}'",
                              context={'keyword': word, 'prompt': self.text})


class PromptVocabulary(nn.Module):
    """Word table plus a learned null row that no word maps to."""

    def __init__(self, words: Sequence[str], d_tau: int):
        super().__init__()
        ordered = sorted(set(words))
        if not ordered:
            raise VocabularyError("vocabulary must contain at least one word")
        self.words: List[str] = ordered
        self.index = {word: i for i, word in enumerate(ordered)}
        self.d_tau = d_tau
        self.embedding = nn.Embedding(len(ordered), d_tau)
        self.null_embedding = nn.Parameter(torch.randn(1, d_tau) * 0.02)
        nn.init.normal_(self.embedding.weight, std=0.02)

    def tokenize(self, text: str) -> List[str]:
        """Whitespace tokens of ``text``.

        Raises:
            VocabularyError: Listing every out-of-vocabulary token
        """
        tokens = text.lower().split()
        unknown = [token for token in tokens if token not in self.index]
        if unknown:
            raise VocabularyError(f"out-of-vocabulary tokens: {', '.join(unknown)}",
                                  context={'unknown_tokens': unknown, 'prompt': text})
        return tokens

    def forward(self, text: str) -> PromptEmbedding:
        return embed_prompt(text, self)


def embed_prompt(text: str, vocab: PromptVocabulary) -> PromptEmbedding:
    """Embed ``text`` as one row per token.

    An empty prompt yields the null embedding (M=1) with no token spans.
    """
    tokens = vocab.tokenize(text)
    if not tokens:
        return PromptEmbedding(text="", rows=vocab.null_embedding, token_spans=())
    ids = torch.tensor([vocab.index[token] for token in tokens], dtype=torch.long)
    spans = tuple(TokenSpan(token, i, i + 1) for i, token in enumerate(tokens))
    return PromptEmbedding(text=" ".join(tokens), rows=vocab.embedding(ids), token_spans=spans)


def null_prompt(vocab: PromptVocabulary) -> PromptEmbedding:
    return embed_prompt("", vocab)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided noise estimate ``eps_uncond + w * (eps_cond - eps_uncond)``.

    Evaluated as ``(1 - w) * eps_uncond + w * eps_cond`` so that w=1 and w=0
    return the respective branch exactly.

    Raises:
        ConditionError: On shape mismatch or negative ``w``
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ConditionError(f"guidance branches differ in shape: {tuple(eps_cond.shape)} vs "
                             f"{tuple(eps_uncond.shape)}",
                             context={'cond': list(eps_cond.shape), 'uncond': list(eps_uncond.shape)})
    if w < 0:
        raise ConditionError(f"guidance strength must be >= 0, got {w}")
    return (1.0 - w) * eps_uncond + w * eps_cond
