from __future__ import annotations

import numpy as np
import pytest

from dst_lab.assembly import (
    EmbeddingPipeline,
    OracleExact,
    OracleNoisy,
    OracleTruncated,
    assemble,
    context_length_report,
    expected_total_rows,
    make_predictor,
    run_dialogue,
)
from dst_lab.corpus import DialogueState
from dst_lab.metrics import jga, jga_per_turn, references_from_corpus
from dst_lab.neural.pipeline import (
    CompressorConfig,
    SpeechEmbedding,
    build_compressor,
    build_connector,
    build_encoder_stub,
)
from dst_lab.postprocess import MatchPolicy
from dst_lab.state_codec import Strategy

RNG = np.random.default_rng(77)
CONFIG = CompressorConfig(d_model=16, n_heads=2, n_queries=10, seed=5)


def _embeddings(rows: list[int]) -> list[SpeechEmbedding]:
    return [
        SpeechEmbedding(RNG.standard_normal((r, CONFIG.d_model)), "d0", i + 1)
        for i, r in enumerate(rows)
    ]


def _embedder(feature_dim: int, stride: int = 1) -> EmbeddingPipeline:
    return EmbeddingPipeline(
        connector=build_connector(feature_dim, CONFIG),
        encoder_stub=build_encoder_stub(feature_dim, CONFIG),
        stride=stride,
    )


# ---------------------------------------------------------------------------
# assemble
# ---------------------------------------------------------------------------


def test_single_turn_all_strategies_equal_h1():
    embs = _embeddings([12])
    compressor = build_compressor(CONFIG)
    for strategy in Strategy:
        ctx = assemble(strategy, embs, compressor)
        assert np.array_equal(ctx.speech_part, embs[0].matrix)
        assert ctx.total_rows == 12


def test_full_spoken_row_sum():
    ctx = assemble(Strategy.FULL_SPOKEN, _embeddings([30, 20, 25, 15]))
    assert ctx.total_rows == 90


def test_compressed_rows_formula():
    ctx = assemble(Strategy.COMPRESSED_SPOKEN, _embeddings([30, 20, 25, 15]), build_compressor(CONFIG))
    assert ctx.total_rows == 3 * 10 + 15


def test_multimodal_keeps_only_current_turn():
    embs = _embeddings([30, 20, 25, 15])
    ctx = assemble(Strategy.MULTIMODAL, embs)
    assert np.array_equal(ctx.speech_part, embs[-1].matrix)
    assert [s.turn_index for s in ctx.bookkeeping] == [4]


def test_bookkeeping_partitions_rows():
    for strategy in (Strategy.FULL_SPOKEN, Strategy.COMPRESSED_SPOKEN):
        ctx = assemble(strategy, _embeddings([7, 3, 9, 2, 5]), build_compressor(CONFIG))
        position = 0
        for span in ctx.bookkeeping:
            assert span.start_row == position
            position += span.n_rows
        assert position == ctx.total_rows
        assert [s.turn_index for s in ctx.bookkeeping] == [1, 2, 3, 4, 5]


def test_missing_compressor_rejected():
    with pytest.raises(ValueError, match="requires a compressor"):
        assemble(Strategy.COMPRESSED_SPOKEN, _embeddings([5, 5]))


def test_compress_current_flag():
    ctx = assemble(
        Strategy.COMPRESSED_SPOKEN,
        _embeddings([30, 20, 25, 15]),
        build_compressor(CONFIG),
        compress_current=True,
    )
    assert ctx.total_rows == 4 * 10


def test_prior_turn_rows_never_change_compressed_total():
    compressor = build_compressor(CONFIG)
    a = assemble(Strategy.COMPRESSED_SPOKEN, _embeddings([30, 20, 15]), compressor)
    b = assemble(Strategy.COMPRESSED_SPOKEN, _embeddings([3, 200, 15]), compressor)
    assert a.total_rows == b.total_rows == 2 * 10 + 15
    c = assemble(Strategy.COMPRESSED_SPOKEN, _embeddings([30, 20, 17]), compressor)
    assert c.total_rows == a.total_rows + 2


def test_assemble_deterministic():
    embs = _embeddings([4, 6, 8])
    compressor = build_compressor(CONFIG)
    x = assemble(Strategy.COMPRESSED_SPOKEN, embs, compressor)
    y = assemble(Strategy.COMPRESSED_SPOKEN, embs, compressor)
    assert np.array_equal(x.speech_part, y.speech_part)


# ---------------------------------------------------------------------------
# run_dialogue with oracles
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("strategy", list(Strategy))
def test_oracle_exact_reproduces_gold(small_corpus, taxonomy, strategy):
    embedder = _embedder(8)
    compressor = build_compressor(CONFIG)
    predictions = {}
    for dlg in small_corpus:
        for result in run_dialogue(dlg, strategy, OracleExact(), embedder, compressor):
            assert not result.parse_failed
            predictions[(dlg.id, result.turn_index)] = result.state
    references = references_from_corpus(small_corpus)
    assert jga(predictions, references, MatchPolicy(), taxonomy) == 1.0


def test_oracle_noisy_deterministic(small_corpus):
    embedder = _embedder(8)
    dlg = small_corpus[0]
    a = run_dialogue(dlg, Strategy.FULL_SPOKEN, OracleNoisy(seed=3), embedder)
    b = run_dialogue(dlg, Strategy.FULL_SPOKEN, OracleNoisy(seed=3), embedder)
    assert [r.raw_output for r in a] == [r.raw_output for r in b]
    c = run_dialogue(dlg, Strategy.FULL_SPOKEN, OracleNoisy(seed=4), embedder)
    assert [r.raw_output for r in a] != [r.raw_output for r in c]


def test_multimodal_feedback_uses_model_hypotheses(small_corpus):
    # a noisy oracle's typo'd transcription must appear in later prompts
    embedder = _embedder(8)
    dlg = small_corpus[0]
    noisy = OracleNoisy(seed=1, typo_prob=1.0, drop_prob=0.0, insert_prob=0.0)
    results = run_dialogue(dlg, Strategy.MULTIMODAL, noisy, embedder)
    hypothesis_1 = noisy.perturb_text(dlg.id, 1, dlg.turns[0].transcript)
    assert hypothesis_1 != dlg.turns[0].transcript
    prompt_turn_3 = results[1].raw_output
    assert f"USER: {hypothesis_1}" in prompt_turn_3
    assert f"USER: {dlg.turns[0].transcript}" not in prompt_turn_3


def test_truncated_oracle_degrades_late_turns_under_full_spoken(small_corpus, taxonomy):
    embedder = _embedder(8)
    references = references_from_corpus(small_corpus)
    budget_pred = OracleTruncated(budget_rows=10)
    predictions = {}
    for dlg in small_corpus:
        for result in run_dialogue(dlg, Strategy.FULL_SPOKEN, budget_pred, embedder):
            predictions[(dlg.id, result.turn_index)] = result.state
    per_turn = jga_per_turn(predictions, references, MatchPolicy(), taxonomy)
    indices = sorted(per_turn)
    early = np.mean([per_turn[i][0] for i in indices[: len(indices) // 2]])
    late = np.mean([per_turn[i][0] for i in indices[len(indices) // 2 :]])
    assert early > late
    assert per_turn[indices[0]][0] == 1.0  # first turn always fits the budget


def test_make_predictor_dispatch():
    assert isinstance(make_predictor("exact"), OracleExact)
    assert isinstance(make_predictor("noisy", seed=2), OracleNoisy)
    assert isinstance(make_predictor("truncated", budget_rows=5), OracleTruncated)
    with pytest.raises(ValueError):
        make_predictor("llm")


def test_parse_failure_becomes_empty_state(small_corpus):
    class BrokenPredictor:
        def predict(self, request):
            return "not json at all"

    # spoken prompt prefix plus garbage still yields an unparseable object
    embedder = _embedder(8)
    dlg = small_corpus[0]
    results = run_dialogue(dlg, Strategy.MULTIMODAL, BrokenPredictor(), embedder)
    assert all(r.parse_failed for r in results)
    assert all(r.state == DialogueState() for r in results)
    assert all(r.diagnostics for r in results)


# ---------------------------------------------------------------------------
# context length report
# ---------------------------------------------------------------------------


def test_context_length_report_matches_formulas(small_corpus):
    embedder = _embedder(8)
    rows = context_length_report(
        small_corpus, [Strategy.FULL_SPOKEN, Strategy.COMPRESSED_SPOKEN], [10], embedder
    )
    by_key = {(r.strategy, r.n_queries, r.turn_index): r for r in rows}
    per_turn_rows = {
        dlg.id: [embedder.embed_turn(dlg, t.index).rows for t in dlg.turns] for dlg in small_corpus
    }
    for dlg in small_corpus:
        for n in dlg.user_turn_indices():
            full = expected_total_rows(Strategy.FULL_SPOKEN, per_turn_rows[dlg.id][:n], 0)
            assert full == sum(per_turn_rows[dlg.id][:n])
    # aggregated means are consistent with per-dialogue row counts
    n_max = max(idx for dlg in small_corpus for idx in dlg.user_turn_indices())
    expected_mean = np.mean([sum(per_turn_rows[d.id][:n_max]) for d in small_corpus])
    assert by_key[(Strategy.FULL_SPOKEN, None, n_max)].mean_rows == pytest.approx(expected_mean)


def test_context_length_single_turn_equal_rows(probe_corpus):
    embedder = _embedder(8)
    first_turn = [
        r
        for r in context_length_report(
            probe_corpus, list(Strategy), [4], embedder
        )
        if r.turn_index == 1
    ]
    values = {r.mean_rows for r in first_turn}
    assert len(values) == 1


def test_context_length_ratio_near_one_when_queries_match_mean_rows(probe_corpus):
    embedder = _embedder(8)
    per_turn_rows = {
        dlg.id: [embedder.embed_turn(dlg, t.index).rows for t in dlg.turns]
        for dlg in probe_corpus
    }
    mean_rows = int(round(np.mean([r for rows in per_turn_rows.values() for r in rows])))
    rows = context_length_report(
        probe_corpus, [Strategy.FULL_SPOKEN, Strategy.COMPRESSED_SPOKEN], [mean_rows], embedder
    )
    last_idx = max(r.turn_index for r in rows)
    full = next(
        r for r in rows if r.strategy is Strategy.FULL_SPOKEN and r.turn_index == last_idx
    )
    compressed = next(
        r for r in rows if r.strategy is Strategy.COMPRESSED_SPOKEN and r.turn_index == last_idx
    )
    assert compressed.mean_rows / full.mean_rows == pytest.approx(1.0, abs=0.25)


def test_compressed_strictly_smaller_when_turns_exceed_queries():
    # synthetic check of the size advantage whenever mean turn length > N_queries
    rows = [30, 20, 25, 15]
    for n in range(2, 5):
        full = expected_total_rows(Strategy.FULL_SPOKEN, rows[:n], 0)
        compressed = expected_total_rows(Strategy.COMPRESSED_SPOKEN, rows[:n], 10)
        assert compressed < full
