import pytest
import torch

from src.services.condition import (ConditionError, PromptVocabulary, VocabularyError, cfg_combine, embed_prompt,
                                    null_prompt)


@pytest.fixture
def vocab():
    torch.manual_seed(0)
    return PromptVocabulary(["a", "solo", "piano", "violin", "music"], d_tau=8)


def test_prompt_rows_follow_tokens(vocab):
    embedding = embed_prompt("a solo piano music", vocab)

    assert embedding.rows.shape == (4, 8)
    assert embedding.span_of("piano").start == 2
    assert embedding.span_of("piano").stop == 3
    assert not embedding.is_null


def test_tokenization_is_case_insensitive(vocab):
    assert torch.equal(embed_prompt("A Solo PIANO music", vocab).rows, embed_prompt("a solo piano music", vocab).rows)


def test_empty_prompt_is_the_null_row(vocab):
    embedding = null_prompt(vocab)

    assert embedding.is_null
    assert embedding.length == 1
    assert embedding.token_spans == ()
    assert torch.equal(embed_prompt("   ", vocab).rows, embedding.rows)


def test_unknown_words_are_all_listed(vocab):
    with pytest.raises(VocabularyError) as exc_info:
        embed_prompt("a solo banjo kazoo music", vocab)
    assert exc_info.value.context['unknown_tokens'] == ["banjo", "kazoo"]


def test_span_of_missing_keyword(vocab):
    with pytest.raises(VocabularyError):
        embed_prompt("a solo piano music", vocab).span_of("violin")


def test_cfg_endpoints_are_exact():
    generator = torch.Generator().manual_seed(1)
    cond = torch.randn(6, 4, generator=generator, dtype=torch.float64)
    uncond = torch.randn(6, 4, generator=generator, dtype=torch.float64)

    assert torch.equal(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.equal(cfg_combine(cond, uncond, 0.0), uncond)
    torch.testing.assert_close(cfg_combine(cond, uncond, 5.5), uncond + 5.5 * (cond - uncond))


def test_cfg_rejects_bad_inputs():
    with pytest.raises(ConditionError):
        cfg_combine(torch.zeros(2, 3), torch.zeros(3, 2), 2.0)
    with pytest.raises(ConditionError):
        cfg_combine(torch.zeros(2, 3), torch.zeros(2, 3), -0.5)


def test_empty_vocabulary_is_rejected():
    with pytest.raises(VocabularyError):
        PromptVocabulary([], d_tau=4)
