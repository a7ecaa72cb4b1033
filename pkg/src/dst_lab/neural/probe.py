"""Retention probe: how much per-turn content survives query compression.

Works on synthetic corpora whose user turns all mention the same number of
slot-value pairs (``mentions_per_turn`` set). For each query count, a fresh
pipeline is trained to recover the mentioned values from the compressed turn,
and held-out recovery accuracy is reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..corpus import Dialogue, Speaker, ontology_values, scan_transcript_mentions
from .pipeline import (
    CompressorConfig,
    ParameterMask,
    Pipeline,
    build_compressor,
    build_connector,
    build_encoder_stub,
    build_readout,
)
from .train import TrainingConfig, TrainingDivergence, accuracy, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 0.2
    epochs: int = 600
    seed: int = 0
    d_model: int = 16
    n_heads: int = 2
    train_fraction: float = 0.8
    freeze_connector: bool = True


@dataclass
class ProbeDataset:
    features: np.ndarray  # (n_turns, frames, d_feat)
    labels: np.ndarray  # (n_turns, n_slots)
    dialogue_ids: list[str]
    n_classes: int

    @property
    def n_slots(self) -> int:
        return int(self.labels.shape[1])

    @property
    def turn_rows(self) -> int:
        return int(self.features.shape[1])


def build_probe_dataset(corpus: list[Dialogue]) -> ProbeDataset:
    """Stack user turns into uniform tensors with per-slot value labels."""
    feats: list[np.ndarray] = []
    labels: list[list[int]] = []
    ids: list[str] = []
    n_classes = 0
    expected_pairs: list[tuple[str, str]] | None = None
    for dlg in sorted(corpus, key=lambda d: d.id):
        for turn in dlg.turns:
            if turn.speaker is not Speaker.USER:
                continue
            if turn.features is None:
                raise ValueError(f"turn {turn.index} of {dlg.id} has no features")
            mentions = scan_transcript_mentions(turn.transcript)
            if not mentions:
                raise ValueError(
                    f"turn {turn.index} of {dlg.id} has no parseable mentions; "
                    "generate the probe corpus with mentions_per_turn set"
                )
            pairs = [(d, s) for d, s, _ in mentions]
            if expected_pairs is None:
                expected_pairs = pairs
            elif pairs != expected_pairs:
                raise ValueError(
                    f"probe requires a uniform slot schedule; {dlg.id} turn {turn.index} "
                    f"mentions {pairs}, expected {expected_pairs}"
                )
            row_labels = []
            for domain, slot, value in mentions:
                values = ontology_values(domain, slot)
                row_labels.append(values.index(value))
                n_classes = max(n_classes, len(values))
            feats.append(turn.features)
            labels.append(row_labels)
            ids.append(dlg.id)
    if not feats:
        raise ValueError("corpus has no user turns")
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise ValueError(f"probe requires uniform turn shapes, found {sorted(shapes)}")
    return ProbeDataset(
        features=np.stack(feats, axis=0),
        labels=np.asarray(labels, dtype=np.int64),
        dialogue_ids=ids,
        n_classes=n_classes,
    )


def _split_indices(dataset: ProbeDataset, train_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    unique_ids = sorted(set(dataset.dialogue_ids))
    n_train = max(1, min(len(unique_ids) - 1, int(round(train_fraction * len(unique_ids)))))
    train_ids = set(unique_ids[:n_train])
    is_train = np.asarray([d in train_ids for d in dataset.dialogue_ids])
    return np.where(is_train)[0], np.where(~is_train)[0]


def build_probe_pipeline(d_feat: int, n_queries: int, dataset: ProbeDataset, hyper: ProbeHyper) -> Pipeline:
    config = CompressorConfig(
        d_model=hyper.d_model, n_heads=hyper.n_heads, n_queries=n_queries, seed=hyper.seed
    )
    return Pipeline(
        encoder_stub=build_encoder_stub(d_feat, config),
        connector=build_connector(d_feat, config),
        compressor=build_compressor(config),
        readout=build_readout(n_queries, config, dataset.n_slots, dataset.n_classes),
    )


PROBE_MASK = ParameterMask.freeze("encoder_stub")


def probe_mask(hyper: ProbeHyper) -> ParameterMask:
    """Encoder stub always frozen; the connector optionally stays at its random init."""
    frozen = ["encoder_stub"]
    if hyper.freeze_connector:
        frozen.append("connector")
    return ParameterMask.freeze(*frozen)


def _train_with_retry(pipeline, mask, dataset, hyper: ProbeHyper):
    """Plain gradient descent diverges above a data-dependent step size; retry
    the full schedule at half the rate when that happens."""
    lr = hyper.lr
    last: TrainingDivergence | None = None
    for _ in range(4):
        try:
            return train(
                pipeline, mask, dataset, TrainingConfig(lr=lr, epochs=hyper.epochs, seed=hyper.seed)
            )
        except TrainingDivergence as exc:
            log.warning("training diverged at lr=%.4f; retrying at %.4f", lr, lr / 2)
            last = exc
            lr /= 2
    raise last


def probe_retention(
    corpus: list[Dialogue],
    n_queries_list: list[int],
    hyper: ProbeHyper | None = None,
) -> dict[int, float]:
    """Held-out slot-recovery accuracy per query count.

    The encoder stub stays frozen (the published two-stage recipe freezes the
    encoder during state-tracking training); the compressor and readout train
    jointly, with the connector frozen by default so the contrast between
    query counts isolates compressor capacity.
    """
    if not n_queries_list:
        return {}
    hyper = hyper or ProbeHyper()
    dataset = build_probe_dataset(corpus)
    train_idx, held_idx = _split_indices(dataset, hyper.train_fraction)
    mask = probe_mask(hyper)
    results: dict[int, float] = {}
    for n_queries in n_queries_list:
        pipeline = build_probe_pipeline(dataset.features.shape[2], n_queries, dataset, hyper)
        outcome = _train_with_retry(
            pipeline, mask, (dataset.features[train_idx], dataset.labels[train_idx]), hyper
        )
        logits = outcome.pipeline.forward(dataset.features[held_idx])
        acc = accuracy(logits, dataset.labels[held_idx])
        log.info(
            "probe n_queries=%d train_loss=%.4f heldout_accuracy=%.4f",
            n_queries,
            outcome.trace[-1],
            acc,
        )
        results[n_queries] = acc
    return results
