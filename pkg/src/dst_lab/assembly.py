"""Context assembly for the three strategies, plus pluggable state predictors.

``assemble`` realizes the embedding-sequence layouts: the multimodal context
carries only the current turn's embedding, the full spoken context the
concatenation of every turn, and the compressed spoken context replaces each
prior turn with its pooled query vectors while the current turn stays
uncompressed.

The predictor oracles stand in for the language model. They read gold states
(optionally perturbing them) so the harness, codecs and metrics can be tested
end to end; they do not model speech understanding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .corpus import Dialogue, DialogueState, SplitMix64, Speaker, derive_key, ONTOLOGY, ontology_values
from .neural.pipeline import (
    Compressor,
    Connector,
    EncoderStub,
    SpeechEmbedding,
    compress_turn,
    connector_forward,
    downsample,
)
from .state_codec import (
    AsrHypothesis,
    ParseFailure,
    PromptSpec,
    SPOKEN_PROMPT_PREFIX,
    Strategy,
    build_prompt,
    extract_user_last_turn,
    parse_state,
    serialize_state,
)


@dataclass(frozen=True)
class TurnSpan:
    turn_index: int
    start_row: int
    n_rows: int


@dataclass
class AssembledContext:
    strategy: Strategy
    speech_part: np.ndarray
    bookkeeping: list[TurnSpan]
    text_part: str = ""

    @property
    def total_rows(self) -> int:
        return int(self.speech_part.shape[0])


def assemble(
    strategy: Strategy,
    turn_embeddings: list[SpeechEmbedding],
    compressor: Compressor | None = None,
    *,
    compress_current: bool = False,
    text_part: str = "",
) -> AssembledContext:
    """Concatenate turn embeddings according to the strategy.

    ``turn_embeddings`` covers turns 1..n in order; the last entry is the
    current user turn.
    """
    if not turn_embeddings:
        raise ValueError("need at least one turn embedding")
    if strategy is Strategy.COMPRESSED_SPOKEN and compressor is None:
        raise ValueError("compressed_spoken requires a compressor")

    if strategy is Strategy.MULTIMODAL:
        current = turn_embeddings[-1]
        spans = [TurnSpan(current.turn_index, 0, current.rows)]
        return AssembledContext(strategy, current.matrix.copy(), spans, text_part)

    parts: list[np.ndarray] = []
    spans: list[TurnSpan] = []
    row = 0
    for position, emb in enumerate(turn_embeddings):
        is_current = position == len(turn_embeddings) - 1
        if strategy is Strategy.COMPRESSED_SPOKEN and (not is_current or compress_current):
            block = compress_turn(emb, compressor)
        else:
            block = emb.matrix
        parts.append(block)
        spans.append(TurnSpan(emb.turn_index, row, block.shape[0]))
        row += block.shape[0]
    return AssembledContext(strategy, np.concatenate(parts, axis=0), spans, text_part)


# ---------------------------------------------------------------------------
# Embedding computation
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingPipeline:
    """features -> (encoder stub) -> stride downsample -> connector."""

    connector: Connector
    encoder_stub: EncoderStub | None = None
    stride: int = 1

    def embed_turn(self, dialogue: Dialogue, turn_index: int) -> SpeechEmbedding:
        turn = dialogue.turn(turn_index)
        if turn.features is None:
            raise ValueError(f"turn {turn_index} of dialogue {dialogue.id} has no features")
        x = turn.features
        if self.encoder_stub is not None:
            x = self.encoder_stub.forward(x[None, :, :])[0]
        x = downsample(x, self.stride)
        return SpeechEmbedding(connector_forward(x, self.connector), dialogue.id, turn_index)

    def embed_dialogue(self, dialogue: Dialogue, up_to: int | None = None) -> list[SpeechEmbedding]:
        last = up_to if up_to is not None else len(dialogue.turns)
        return [self.embed_turn(dialogue, i) for i in range(1, last + 1)]


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


@dataclass
class PredictionRequest:
    dialogue: Dialogue
    turn_index: int
    strategy: Strategy
    prompt: PromptSpec
    context: AssembledContext
    gold_state: DialogueState


class StatePredictor(Protocol):
    """Produces the autoregressive completion of a prompt."""

    def predict(self, request: PredictionRequest) -> str: ...


def render_completion(strategy: Strategy, state: DialogueState, user_last_turn: str | None = None) -> str:
    """Completion text matching each prompt layout's generated fields."""
    serialized = serialize_state(state)
    if strategy is Strategy.MULTIMODAL:
        body = serialized[1:-1]  # inner fields of the canonical object
        return json.dumps(user_last_turn or "", ensure_ascii=True) + ", " + body + " }"
    assert serialized.startswith('{"domains":')
    return serialized[len(SPOKEN_PROMPT_PREFIX) - 1 :]


class OracleExact:
    """Reads the gold state; transcribes the user turn verbatim."""

    name = "exact"

    def predict(self, request: PredictionRequest) -> str:
        hypothesis = request.dialogue.turn(request.turn_index).transcript
        return render_completion(request.strategy, request.gold_state, hypothesis)


class OracleNoisy:
    """Gold state plus seeded perturbations: drops, typos, spurious slots,
    and 12-hour reformatting of time-like values.

    Perturbations are keyed by (seed, dialogue id, turn index), so outputs are
    stable under any execution order or worker count.
    """

    name = "noisy"

    def __init__(
        self,
        seed: int,
        drop_prob: float = 0.08,
        typo_prob: float = 0.10,
        insert_prob: float = 0.05,
        time_reformat_prob: float = 0.25,
    ):
        self.seed = seed
        self.drop_prob = drop_prob
        self.typo_prob = typo_prob
        self.insert_prob = insert_prob
        self.time_reformat_prob = time_reformat_prob

    def _typo(self, rng: SplitMix64, value: str) -> str:
        if len(value) < 2:
            return value + "x"
        kind = rng.randint(3)
        pos = rng.randint(len(value) - 1)
        if kind == 0:  # swap adjacent
            return value[:pos] + value[pos + 1] + value[pos] + value[pos + 2 :]
        if kind == 1:  # drop one character
            return value[:pos] + value[pos + 1 :]
        return value[:pos] + "aeiou"[rng.randint(5)] + value[pos + 1 :]  # replace

    def _reformat_time(self, value: str) -> str:
        hh, _, mm = value.partition(":")
        hour = int(hh)
        suffix = "am" if hour < 12 else "pm"
        hour12 = hour % 12
        if hour12 == 0:
            hour12 = 12
        return f"{hour12}:{mm} {suffix}"

    def perturb_state(self, dialogue_id: str, turn_index: int, gold: DialogueState) -> DialogueState:
        rng = SplitMix64(derive_key(self.seed, "noisy", dialogue_id, turn_index))
        domains = list(gold.domains)
        slots: dict[tuple[str, str], str] = {}
        for (domain, slot), value in sorted(gold.slots.items()):
            if rng.uniform() < self.drop_prob:
                continue
            if ":" in value and rng.uniform() < self.time_reformat_prob:
                value = self._reformat_time(value)
            elif rng.uniform() < self.typo_prob:
                value = self._typo(rng, value)
            slots[(domain, slot)] = value
        if rng.uniform() < self.insert_prob:
            domain = rng.choice(sorted(ONTOLOGY))
            slot = rng.choice(sorted(ONTOLOGY[domain]))
            if (domain, slot) not in gold.slots:
                if domain not in domains:
                    domains.append(domain)
                slots[(domain, slot)] = rng.choice(ontology_values(domain, slot))
        kept_domains = [d for d in domains if any(k[0] == d for k in slots) or d in gold.domains]
        return DialogueState(kept_domains, slots)

    def perturb_text(self, dialogue_id: str, turn_index: int, text: str) -> str:
        rng = SplitMix64(derive_key(self.seed, "asr", dialogue_id, turn_index))
        words = text.split()
        out = []
        for word in words:
            if rng.uniform() < self.typo_prob:
                word = self._typo(rng, word)
            out.append(word)
        return " ".join(out)

    def predict(self, request: PredictionRequest) -> str:
        state = self.perturb_state(request.dialogue.id, request.turn_index, request.gold_state)
        hypothesis = self.perturb_text(
            request.dialogue.id,
            request.turn_index,
            request.dialogue.turn(request.turn_index).transcript,
        )
        return render_completion(request.strategy, state, hypothesis)


class OracleTruncated:
    """Forgets slots whose source turn falls outside a row budget.

    The budget keeps the most recent ``budget_rows`` rows of the assembled
    speech part; a slot survives only if the user turn where its current value
    was last set lies fully inside the kept window.
    """

    name = "truncated"

    def __init__(self, budget_rows: int):
        if budget_rows < 1:
            raise ValueError("budget_rows must be >= 1")
        self.budget_rows = budget_rows

    def _kept_turns(self, context: AssembledContext) -> set[int]:
        cutoff = max(0, context.total_rows - self.budget_rows)
        return {span.turn_index for span in context.bookkeeping if span.start_row >= cutoff}

    def predict(self, request: PredictionRequest) -> str:
        kept = self._kept_turns(request.context)
        if request.strategy is Strategy.MULTIMODAL:
            # only the current turn is speech; the text history stays available
            kept |= set(range(1, request.turn_index + 1))
        dialogue = request.dialogue
        sources: dict[tuple[str, str], int] = {}
        for idx in sorted(i for i in dialogue.gold_states if i <= request.turn_index):
            for key, value in dialogue.gold_states[idx].slots.items():
                if key not in sources or dialogue.gold_states[sources[key]].slots.get(key) != value:
                    sources[key] = idx
        gold = request.gold_state
        slots = {k: v for k, v in gold.slots.items() if sources.get(k, request.turn_index) in kept}
        domains = [d for d in gold.domains if any(k[0] == d for k in slots)]
        state = DialogueState(domains, slots)
        hypothesis = dialogue.turn(request.turn_index).transcript
        return render_completion(request.strategy, state, hypothesis)


def make_predictor(kind: str, seed: int = 0, **kwargs) -> StatePredictor:
    if kind == "exact":
        return OracleExact()
    if kind == "noisy":
        return OracleNoisy(seed=seed, **kwargs)
    if kind == "truncated":
        return OracleTruncated(budget_rows=int(kwargs.get("budget_rows", 64)))
    raise ValueError(f"unknown predictor {kind!r}; expected exact, noisy, or truncated")


# ---------------------------------------------------------------------------
# Dialogue execution
# ---------------------------------------------------------------------------


@dataclass
class TurnResult:
    turn_index: int
    raw_output: str
    state: DialogueState
    parse_failed: bool = False
    diagnostics: list[str] = field(default_factory=list)


def run_dialogue(
    dialogue: Dialogue,
    strategy: Strategy,
    predictor: StatePredictor,
    embedder: EmbeddingPipeline,
    compressor: Compressor | None = None,
    *,
    compress_current: bool = False,
    agent_texts: dict[int, str] | None = None,
) -> list[TurnResult]:
    """Predict the state at every user turn, in order.

    For the multimodal strategy the predictor's own transcription of each user
    turn is fed back as that turn's history text for subsequent prompts; gold
    user transcripts never enter the textual history. ``agent_texts`` swaps
    gold agent transcripts for ASR sidecar texts in the history.
    """
    if strategy is Strategy.COMPRESSED_SPOKEN and compressor is None:
        raise ValueError("compressed_spoken requires a compressor")
    results: list[TurnResult] = []
    asr_history: list[AsrHypothesis] = []
    embeddings: list[SpeechEmbedding] = []
    for turn in dialogue.turns:
        embeddings.append(embedder.embed_turn(dialogue, turn.index))
        if turn.speaker is not Speaker.USER:
            continue
        n = turn.index
        prompt = build_prompt(strategy, dialogue, n, asr_history, agent_texts)
        context = assemble(
            strategy,
            embeddings[:n],
            compressor,
            compress_current=compress_current,
            text_part=prompt.text(),
        )
        gold = dialogue.gold_states.get(n, DialogueState())
        completion = predictor.predict(
            PredictionRequest(dialogue, n, strategy, prompt, context, gold)
        )
        raw_output = prompt.text() + completion
        diagnostics: list[str] = []
        try:
            state, diagnostics = parse_state(raw_output)
            failed = False
        except ParseFailure as exc:
            state = DialogueState()
            diagnostics = [f"parse failure: {exc}"]
            failed = True
        if strategy is Strategy.MULTIMODAL:
            hypothesis = extract_user_last_turn(raw_output)
            if hypothesis is None:
                hypothesis = ""
                diagnostics.append("missing user_last_turn in output; empty hypothesis stored")
            asr_history.append(AsrHypothesis(n, hypothesis))
        results.append(TurnResult(n, raw_output, state, failed, diagnostics))
    return results


# ---------------------------------------------------------------------------
# Context-length accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextLengthRow:
    strategy: Strategy
    n_queries: int | None
    turn_index: int
    mean_rows: float
    n_turns: int


def expected_total_rows(
    strategy: Strategy, per_turn_rows: list[int], n_queries: int, *, compress_current: bool = False
) -> int:
    """Row-count law for a context over turns 1..n with the given per-turn rows."""
    if strategy is Strategy.MULTIMODAL:
        return per_turn_rows[-1]
    if strategy is Strategy.FULL_SPOKEN:
        return sum(per_turn_rows)
    prior = (len(per_turn_rows) - 1) * n_queries
    current = n_queries if compress_current else per_turn_rows[-1]
    return prior + current


def context_length_report(
    corpus: list[Dialogue],
    strategies: list[Strategy],
    n_queries_list: list[int],
    embedder: EmbeddingPipeline,
) -> list[ContextLengthRow]:
    """Mean assembled rows per user-turn index for each strategy."""
    per_dialogue_rows: dict[str, list[int]] = {}
    for dlg in corpus:
        rows = []
        for turn in dlg.turns:
            emb = embedder.embed_turn(dlg, turn.index)
            rows.append(emb.rows)
        per_dialogue_rows[dlg.id] = rows

    out: list[ContextLengthRow] = []
    variants: list[tuple[Strategy, int | None]] = []
    for strategy in strategies:
        if strategy is Strategy.COMPRESSED_SPOKEN:
            variants.extend((strategy, n) for n in n_queries_list)
        else:
            variants.append((strategy, None))
    for strategy, n_queries in variants:
        totals: dict[int, list[int]] = {}
        for dlg in corpus:
            rows = per_dialogue_rows[dlg.id]
            for n in dlg.user_turn_indices():
                total = expected_total_rows(strategy, rows[:n], n_queries or 0)
                totals.setdefault(n, []).append(total)
        for turn_index in sorted(totals):
            values = totals[turn_index]
            out.append(
                ContextLengthRow(
                    strategy=strategy,
                    n_queries=n_queries,
                    turn_index=turn_index,
                    mean_rows=float(np.mean(values)),
                    n_turns=len(values),
                )
            )
    return out
