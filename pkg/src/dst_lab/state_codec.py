"""Serialization and parsing of dialogue states, and prompt construction.

The canonical state encoding is a compact JSON object with a "domains" array
and a "predicted_state" object. Parsing is deliberately forgiving: model-like
output may be truncated mid-string or carry trailing commas, and evaluation
must degrade to an empty state rather than crash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .corpus import Dialogue, DialogueState, Speaker


class Strategy(str, Enum):
    MULTIMODAL = "multimodal"
    FULL_SPOKEN = "full_spoken"
    COMPRESSED_SPOKEN = "compressed_spoken"


class ParseFailure(ValueError):
    """Unrecoverable prediction text. Carries the raw output for diagnostics."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class TextSegment:
    text: str


@dataclass(frozen=True)
class EmbeddingSlot:
    turn_index: int
    expected_rows: int | None = None


@dataclass
class PromptSpec:
    """Interleaved text and embedding placeholders for one prompt layout."""

    strategy: Strategy
    segments: list[TextSegment | EmbeddingSlot] = field(default_factory=list)

    def embedding_slots(self) -> list[EmbeddingSlot]:
        return [s for s in self.segments if isinstance(s, EmbeddingSlot)]

    def text(self) -> str:
        return "".join(s.text for s in self.segments if isinstance(s, TextSegment))


@dataclass(frozen=True)
class AsrHypothesis:
    turn_index: int
    text: str


# --------------------------------------------------------------------------
# State serialization
# --------------------------------------------------------------------------


def serialize_state(state: DialogueState) -> str:
    """Canonical byte-stable encoding of a dialogue state.

    Domains keep insertion order; slot names are sorted within each domain;
    all keys and values are emitted lower-case; separators are compact.
    """
    nested = state.to_nested()
    doc = {
        "domains": [d.lower() for d in state.domains],
        "predicted_state": {
            domain.lower(): {slot.lower(): value.lower() for slot, value in slot_map.items()}
            for domain, slot_map in nested.items()
        },
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)


def _extract_json_object(text: str) -> tuple[str, list[str]]:
    """Outermost {...} span, repaired if the text ends mid-object."""
    diagnostics: list[str] = []
    start = text.find("{")
    if start < 0:
        raise ParseFailure("no JSON object found", text)
    depth = 0
    in_string = False
    escaped = False
    end = None
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                end = i + 1
                break
    if end is not None:
        return text[start:end], diagnostics
    fragment = text[start:].rstrip()
    if in_string:
        fragment += '"'
        diagnostics.append("repaired: unterminated string")
    fragment = fragment.rstrip()
    if fragment.endswith(","):
        fragment = fragment[:-1].rstrip()
        diagnostics.append("repaired: trailing comma at end of output")
    open_braces = 0
    in_string = False
    escaped = False
    for ch in fragment:
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            open_braces += 1
        elif ch == "}":
            open_braces -= 1
    if open_braces > 0:
        fragment += "}" * open_braces
        diagnostics.append(f"repaired: closed {open_braces} unterminated object(s)")
    return fragment, diagnostics


def _strip_trailing_commas(text: str) -> tuple[str, bool]:
    out: list[str] = []
    in_string = False
    escaped = False
    changed = False
    for ch in text:
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            continue
        if ch in "}]":
            j = len(out) - 1
            while j >= 0 and out[j] in " \t\r\n":
                j -= 1
            if j >= 0 and out[j] == ",":
                del out[j]
                changed = True
        out.append(ch)
    return "".join(out), changed


def parse_state(text: str) -> tuple[DialogueState, list[str]]:
    """Best-effort extraction of a DialogueState from model-like output.

    Returns the state and a list of repair diagnostics. Raises
    :class:`ParseFailure` when no usable JSON object can be recovered.
    """
    fragment, diagnostics = _extract_json_object(text)
    fragment, stripped = _strip_trailing_commas(fragment)
    if stripped:
        diagnostics.append("repaired: trailing comma")
    try:
        doc = json.loads(fragment)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"unparseable output: {exc.msg}", text) from exc
    if not isinstance(doc, dict):
        raise ParseFailure("top-level JSON value is not an object", text)

    doc = {str(k).lower(): v for k, v in doc.items()}
    raw_domains = doc.get("domains", [])
    if not isinstance(raw_domains, list):
        diagnostics.append("ignored: non-list domains field")
        raw_domains = []
    domains = [str(d).lower() for d in raw_domains]

    predicted = doc.get("predicted_state", {})
    if not isinstance(predicted, Mapping):
        diagnostics.append("ignored: non-object predicted_state field")
        predicted = {}
    slots: dict[tuple[str, str], str] = {}
    for domain, slot_map in predicted.items():
        domain_l = str(domain).lower()
        if not isinstance(slot_map, Mapping):
            diagnostics.append(f"ignored: non-object slot map for domain {domain_l!r}")
            continue
        if domain_l not in domains:
            domains.append(domain_l)
            diagnostics.append(f"repaired: domain {domain_l!r} missing from domains list")
        for slot, value in slot_map.items():
            slots[(domain_l, str(slot).lower())] = str(value)
    return DialogueState(domains, slots), diagnostics


def extract_user_last_turn(text: str) -> str | None:
    """The "user_last_turn" string from a multimodal completion, if present."""
    try:
        fragment, _ = _extract_json_object(text)
        fragment, _ = _strip_trailing_commas(fragment)
        doc = json.loads(fragment)
    except (ParseFailure, json.JSONDecodeError):
        return None
    if isinstance(doc, dict):
        value = doc.get("user_last_turn")
        if isinstance(value, str):
            return value
    return None


# --------------------------------------------------------------------------
# Prompt construction
# --------------------------------------------------------------------------

# Frozen layout constants; golden tests pin the exact bytes.
HISTORY_TURN_SEPARATOR = " ; "
MULTIMODAL_PROMPT_PREFIX = '{ "history": '
MULTIMODAL_PROMPT_INFIX = ', "user_last_turn": '
SPOKEN_PROMPT_PREFIX = '{"domains": '


def format_history(entries: Iterable[tuple[Speaker, str]]) -> str:
    """Textual history: "USER: {text} ; AGENT: {text} ; ..." (empty for no turns)."""
    return HISTORY_TURN_SEPARATOR.join(
        f"{speaker.value}: {text}" for speaker, text in entries
    )


def build_prompt(
    strategy: Strategy,
    dialogue: Dialogue,
    turn_index: int,
    asr_history: list[AsrHypothesis] | None = None,
    agent_texts: Mapping[int, str] | None = None,
) -> PromptSpec:
    """Prompt layout for predicting the state at ``turn_index``.

    Multimodal prompts embed only the current user turn and render prior turns
    as text: prior user turns come from ``asr_history`` (the model feedback
    loop), prior agent turns from ``agent_texts`` when given, else from gold
    transcripts. Spoken prompts embed every turn and carry no transcripts.
    """
    turn = dialogue.turn(turn_index)
    if turn.speaker is not Speaker.USER:
        raise ValueError(f"turn {turn_index} of dialogue {dialogue.id} is not a user turn")

    if strategy is Strategy.MULTIMODAL:
        hypotheses = {h.turn_index: h.text for h in (asr_history or [])}
        entries: list[tuple[Speaker, str]] = []
        for prior in dialogue.turns[: turn_index - 1]:
            if prior.speaker is Speaker.USER:
                if prior.index not in hypotheses:
                    raise ValueError(
                        f"missing ASR hypothesis for prior user turn {prior.index} "
                        f"of dialogue {dialogue.id}"
                    )
                entries.append((Speaker.USER, hypotheses[prior.index]))
            else:
                text = prior.transcript
                if agent_texts is not None and prior.index in agent_texts:
                    text = agent_texts[prior.index]
                entries.append((Speaker.AGENT, text))
        text = (
            MULTIMODAL_PROMPT_PREFIX
            + json.dumps(format_history(entries), ensure_ascii=True)
            + MULTIMODAL_PROMPT_INFIX
        )
        return PromptSpec(strategy, [EmbeddingSlot(turn_index), TextSegment(text)])

    slots: list[TextSegment | EmbeddingSlot] = [EmbeddingSlot(i) for i in range(1, turn_index + 1)]
    slots.append(TextSegment(SPOKEN_PROMPT_PREFIX))
    return PromptSpec(strategy, slots)


# --------------------------------------------------------------------------
# Prediction files (newline-delimited JSON)
# --------------------------------------------------------------------------


@dataclass
class PredictionRecord:
    """One evaluated turn: raw model output plus its parsed state, if any."""

    dialogue_id: str
    turn_index: int
    raw_output: str
    parsed_state: DialogueState | None = None
    diagnostics: list[str] = field(default_factory=list)

    def to_json_line(self) -> str:
        obj: dict = {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "raw_output": self.raw_output,
        }
        if self.parsed_state is None:
            obj["parsed_state"] = None
        else:
            obj["parsed_state"] = {
                "domains": self.parsed_state.domains,
                "slots": self.parsed_state.to_nested(),
            }
        if self.diagnostics:
            obj["diagnostics"] = self.diagnostics
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_json_line(cls, line: str) -> "PredictionRecord":
        obj = json.loads(line)
        parsed = obj.get("parsed_state")
        state = None
        if parsed is not None:
            state = DialogueState.from_nested(parsed.get("domains", []), parsed.get("slots", {}))
        return cls(
            dialogue_id=str(obj["dialogue_id"]),
            turn_index=int(obj["turn_index"]),
            raw_output=str(obj.get("raw_output", "")),
            parsed_state=state,
            diagnostics=[str(d) for d in obj.get("diagnostics", [])],
        )


def write_predictions(path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json_line())
            fh.write("\n")


def read_predictions(path) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(PredictionRecord.from_json_line(line))
    return records
