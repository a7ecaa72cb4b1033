from __future__ import annotations

import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dst_lab.corpus import Dialogue, DialogueState, SplitMix64, Speaker, Turn
from dst_lab.state_codec import (
    AsrHypothesis,
    EmbeddingSlot,
    MULTIMODAL_PROMPT_INFIX,
    MULTIMODAL_PROMPT_PREFIX,
    ParseFailure,
    PredictionRecord,
    SPOKEN_PROMPT_PREFIX,
    Strategy,
    TextSegment,
    build_prompt,
    extract_user_last_turn,
    parse_state,
    read_predictions,
    serialize_state,
    write_predictions,
)

# ---------------------------------------------------------------------------
# serialize_state
# ---------------------------------------------------------------------------


def test_serialize_empty_state():
    assert serialize_state(DialogueState()) == '{"domains":[],"predicted_state":{}}'


def test_serialize_single_triple():
    state = DialogueState(["hotel"], {("hotel", "area"): "north"})
    assert (
        serialize_state(state)
        == '{"domains":["hotel"],"predicted_state":{"hotel":{"area":"north"}}}'
    )


def test_serialize_orders_domains_by_insertion_and_slots_sorted():
    state = DialogueState(
        ["taxi", "hotel"],
        {("hotel", "pricerange"): "cheap", ("hotel", "area"): "north", ("taxi", "leaveat"): "17:30"},
    )
    assert serialize_state(state) == (
        '{"domains":["taxi","hotel"],"predicted_state":'
        '{"taxi":{"leaveat":"17:30"},"hotel":{"area":"north","pricerange":"cheap"}}}'
    )


def _random_state(rng: SplitMix64) -> DialogueState:
    letters = string.ascii_lowercase
    n_domains = 1 + rng.randint(3)
    domains = []
    while len(domains) < n_domains:
        name = "".join(rng.choice(list(letters)) for _ in range(4))
        if name not in domains:
            domains.append(name)
    slots = {}
    for domain in domains:
        for _ in range(rng.randint(4)):
            slot = "".join(rng.choice(list(letters)) for _ in range(3))
            value = "".join(rng.choice(list(letters + " -:"))) * (1 + rng.randint(2))
            slots[(domain, slot)] = value.strip() or "x"
    return DialogueState(domains, slots)


def test_roundtrip_1000_random_states():
    rng = SplitMix64(99)
    for _ in range(1000):
        state = _random_state(rng)
        parsed, diagnostics = parse_state(serialize_state(state))
        assert diagnostics == []
        assert parsed == state


def test_serialize_injective_on_sampled_states():
    rng = SplitMix64(123)
    states = [_random_state(rng) for _ in range(200)]
    seen: dict[str, DialogueState] = {}
    for state in states:
        blob = serialize_state(state)
        if blob in seen:
            assert seen[blob] == state
        seen[blob] = state


@settings(max_examples=200)
@given(
    st.dictionaries(
        st.tuples(
            st.text(string.ascii_lowercase, min_size=1, max_size=6),
            st.text(string.ascii_lowercase, min_size=1, max_size=6),
        ),
        st.text(string.ascii_lowercase + " :-", min_size=1, max_size=10).map(
            lambda s: s.strip() or "v"
        ),
        max_size=6,
    )
)
def test_roundtrip_property(slots):
    domains = sorted({d for d, _ in slots})
    state = DialogueState(domains, slots)
    parsed, _ = parse_state(serialize_state(state))
    assert parsed == state


# ---------------------------------------------------------------------------
# parse_state
# ---------------------------------------------------------------------------


def test_parse_truncated_output_is_repaired():
    text = '{"domains":["taxi"],"predicted_state":{"taxi":{"leaveat":"17:30"'
    state, diagnostics = parse_state(text)
    assert state.slots == {("taxi", "leaveat"): "17:30"}
    assert state.domains == ["taxi"]
    assert any("unterminated" in d for d in diagnostics)


def test_parse_truncated_mid_string():
    text = '{"domains":["taxi"],"predicted_state":{"taxi":{"leaveat":"17:3'
    state, diagnostics = parse_state(text)
    assert state.slots == {("taxi", "leaveat"): "17:3"}
    assert any("unterminated string" in d for d in diagnostics)


def test_parse_trailing_comma():
    text = '{"domains":["hotel"],"predicted_state":{"hotel":{"area":"north",}},}'
    state, diagnostics = parse_state(text)
    assert state.slots == {("hotel", "area"): "north"}
    assert any("trailing comma" in d for d in diagnostics)


def test_parse_garbage_raises():
    with pytest.raises(ParseFailure) as err:
        parse_state("garbage")
    assert err.value.raw == "garbage"


def test_parse_upper_case_keys_lowered():
    state, _ = parse_state('{"Domains":["Hotel"],"Predicted_State":{"Hotel":{"Area":"North"}}}')
    assert state.domains == ["hotel"]
    assert state.slots == {("hotel", "area"): "North"}  # values preserved


def test_parse_adds_missing_domain_with_diagnostic():
    state, diagnostics = parse_state('{"domains":[],"predicted_state":{"taxi":{"leaveat":"17:30"}}}')
    assert state.domains == ["taxi"]
    assert any("missing from domains" in d for d in diagnostics)


def test_parse_surrounding_prose():
    text = 'the state is {"domains":["taxi"],"predicted_state":{}} thanks'
    state, _ = parse_state(text)
    assert state.domains == ["taxi"]


# ---------------------------------------------------------------------------
# build_prompt
# ---------------------------------------------------------------------------


def _dialogue_3_turns() -> Dialogue:
    return Dialogue(
        id="d0",
        turns=[
            Turn(1, Speaker.USER, "u1"),
            Turn(2, Speaker.AGENT, "a2"),
            Turn(3, Speaker.USER, "u3"),
        ],
        gold_states={},
    )


def test_multimodal_prompt_golden_bytes():
    prompt = build_prompt(
        Strategy.MULTIMODAL, _dialogue_3_turns(), 3, [AsrHypothesis(1, "u1")]
    )
    slots = prompt.embedding_slots()
    assert slots == [EmbeddingSlot(3)]
    assert isinstance(prompt.segments[0], EmbeddingSlot)
    assert prompt.text() == '{ "history": "USER: u1 ; AGENT: a2", "user_last_turn": '


def test_multimodal_first_turn_history_empty():
    prompt = build_prompt(Strategy.MULTIMODAL, _dialogue_3_turns(), 1, [])
    assert prompt.text() == '{ "history": "", "user_last_turn": '


def test_multimodal_uses_hypothesis_not_gold():
    prompt = build_prompt(
        Strategy.MULTIMODAL, _dialogue_3_turns(), 3, [AsrHypothesis(1, "you won")]
    )
    assert "you won" in prompt.text()
    assert "USER: u1" not in prompt.text()


def test_multimodal_missing_hypothesis_errors():
    with pytest.raises(ValueError, match="missing ASR hypothesis"):
        build_prompt(Strategy.MULTIMODAL, _dialogue_3_turns(), 3, [])


def test_multimodal_agent_text_override():
    prompt = build_prompt(
        Strategy.MULTIMODAL,
        _dialogue_3_turns(),
        3,
        [AsrHypothesis(1, "u1")],
        agent_texts={2: "asr a2"},
    )
    assert "AGENT: asr a2" in prompt.text()


def test_full_spoken_prompt_slots_and_text():
    turns = []
    for i in range(1, 6):
        speaker = Speaker.USER if i % 2 == 1 else Speaker.AGENT
        turns.append(Turn(i, speaker, f"t{i}"))
    dlg = Dialogue(id="d", turns=turns, gold_states={})
    prompt = build_prompt(Strategy.FULL_SPOKEN, dlg, 5)
    assert prompt.embedding_slots() == [EmbeddingSlot(i) for i in range(1, 6)]
    assert prompt.segments[-1] == TextSegment(SPOKEN_PROMPT_PREFIX)
    assert prompt.text() == '{"domains": '
    # pure speech context: no transcripts leak into the text
    for turn in dlg.turns:
        assert turn.transcript not in prompt.text()


def test_compressed_prompt_same_layout_as_full():
    dlg = _dialogue_3_turns()
    full = build_prompt(Strategy.FULL_SPOKEN, dlg, 3)
    compressed = build_prompt(Strategy.COMPRESSED_SPOKEN, dlg, 3)
    assert compressed.embedding_slots() == full.embedding_slots()
    assert compressed.text() == full.text()


def test_build_prompt_rejects_agent_turn():
    with pytest.raises(ValueError, match="not a user turn"):
        build_prompt(Strategy.FULL_SPOKEN, _dialogue_3_turns(), 2)


def test_prompt_constants_frozen():
    assert MULTIMODAL_PROMPT_PREFIX == '{ "history": '
    assert MULTIMODAL_PROMPT_INFIX == ', "user_last_turn": '
    assert SPOKEN_PROMPT_PREFIX == '{"domains": '


def test_extract_user_last_turn():
    raw = '{ "history": "", "user_last_turn": "hello there", "domains": [], "predicted_state": {} }'
    assert extract_user_last_turn(raw) == "hello there"
    assert extract_user_last_turn("nonsense") is None


# ---------------------------------------------------------------------------
# prediction records
# ---------------------------------------------------------------------------


def test_prediction_record_roundtrip(tmp_path):
    records = [
        PredictionRecord("d0", 1, '{"domains":[],"predicted_state":{}}', DialogueState()),
        PredictionRecord(
            "d0",
            3,
            "broken output",
            None,
            diagnostics=["parse failure: no JSON object found"],
        ),
    ]
    path = tmp_path / "pred.ndjson"
    write_predictions(path, records)
    loaded = read_predictions(path)
    assert loaded == records
    assert loaded[1].parsed_state is None
