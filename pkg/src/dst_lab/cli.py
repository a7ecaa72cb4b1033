"""dst-lab: one entry point wiring corpora, strategies, predictors and metrics.

Every subcommand is deterministic given its manifest and seeds: all randomness
flows from explicit seed values and outputs are written in canonical order
regardless of worker count. Set DST_LAB_LOG to control log verbosity.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click

from . import __version__
from .assembly import (
    EmbeddingPipeline,
    context_length_report,
    make_predictor,
    run_dialogue,
)
from .corpus import (
    Dialogue,
    SynthConfig,
    default_corrupted_ids,
    filter_corrupted,
    load_corpus,
    load_taxonomy,
    synth_corpus,
    synthetic_taxonomy,
    write_corpus,
)
from .metrics import (
    AlignmentError,
    evaluate,
    references_from_corpus,
    states_from_records,
)
from .neural.gradcheck import grad_check_suite
from .neural.pipeline import (
    CompressorConfig,
    build_compressor,
    build_connector,
    build_encoder_stub,
)
from .neural.probe import ProbeHyper, probe_retention
from .postprocess import MatchPolicy
from .reporting import (
    render_context_lengths,
    render_report,
    render_retention_table,
)
from .state_codec import PredictionRecord, Strategy, read_predictions, write_predictions

log = logging.getLogger(__name__)

_STRATEGY_ALIASES = {
    "multimodal": Strategy.MULTIMODAL,
    "full": Strategy.FULL_SPOKEN,
    "full_spoken": Strategy.FULL_SPOKEN,
    "compressed": Strategy.COMPRESSED_SPOKEN,
    "compressed_spoken": Strategy.COMPRESSED_SPOKEN,
}


def _configure_logging() -> None:
    level = os.environ.get("DST_LAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def load_policy(name: str) -> MatchPolicy:
    """Named policy ("standard", "exact") or a JSON file path."""
    if name == "standard":
        return MatchPolicy()
    if name == "exact":
        return MatchPolicy.exact()
    path = Path(name)
    if not path.exists():
        raise click.BadParameter(f"policy must be 'standard', 'exact', or a JSON file; {name!r} not found")
    with open(path, "r", encoding="utf-8") as fh:
        return MatchPolicy.from_json_obj(json.load(fh))


def _parse_exclude_ids(value: str | None) -> list[str]:
    if not value:
        return default_corrupted_ids()
    path = Path(value)
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return [str(x) for x in (obj["ids"] if isinstance(obj, dict) else obj)]
    return [part.strip() for part in value.split(",") if part.strip()]


@dataclass
class RunManifest:
    """Archivable description of one prediction run."""

    corpus: str
    strategy: str
    format: str = "synthetic_json"
    predictor: str = "exact"
    seed: int = 0
    n_queries: int = 8
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 1
    stride: int = 1
    compress_current: bool = False
    workers: int = 1
    exclude_ids: list[str] = field(default_factory=list)
    policy: str = "standard"
    out: str = "runs/out"
    drop_prob: float = 0.08
    typo_prob: float = 0.10
    insert_prob: float = 0.05
    time_reformat_prob: float = 0.25
    budget_rows: int = 64
    agent_asr: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise click.BadParameter(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**obj)

    def resolved_strategy(self) -> Strategy:
        key = self.strategy.lower()
        if key not in _STRATEGY_ALIASES:
            raise click.BadParameter(
                f"unknown strategy {self.strategy!r}; expected one of {sorted(_STRATEGY_ALIASES)}"
            )
        return _STRATEGY_ALIASES[key]


def _load_run_corpus(manifest: RunManifest) -> list[Dialogue]:
    dialogues = load_corpus(manifest.corpus, manifest.format)
    return filter_corrupted(dialogues, manifest.exclude_ids)


def _feature_dim(dialogues: list[Dialogue]) -> int:
    for dlg in dialogues:
        for turn in dlg.turns:
            if turn.features is not None:
                return int(turn.features.shape[1])
    raise click.ClickException("corpus carries no feature matrices; generate sidecars first")


def _build_embedder(manifest: RunManifest, d_feat: int) -> tuple[EmbeddingPipeline, CompressorConfig]:
    config = CompressorConfig(
        d_model=manifest.d_model,
        n_heads=manifest.n_heads,
        n_layers=manifest.n_layers,
        n_queries=manifest.n_queries,
        seed=manifest.seed,
    )
    embedder = EmbeddingPipeline(
        connector=build_connector(d_feat, config),
        encoder_stub=build_encoder_stub(d_feat, config),
        stride=manifest.stride,
    )
    return embedder, config


def _load_agent_texts(path: str | None) -> dict[str, dict[int, str]]:
    if not path:
        return {}
    out: dict[str, dict[int, str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.setdefault(str(obj["dialogue_id"]), {})[int(obj["turn_index"])] = str(obj["text"])
    return out


def _execute_dialogue(task: tuple) -> tuple[str, list, str | None]:
    """Worker entry: returns (dialogue_id, turn results, error message or None)."""
    dialogue, strategy, predictor, embedder, compressor, compress_current, agent_texts = task
    try:
        results = run_dialogue(
            dialogue,
            strategy,
            predictor,
            embedder,
            compressor,
            compress_current=compress_current,
            agent_texts=agent_texts,
        )
        return dialogue.id, results, None
    except Exception as exc:  # per-dialogue isolation: the run continues
        return dialogue.id, [], f"{type(exc).__name__}: {exc}"


@click.group()
@click.version_option(version=__version__, prog_name="dst-lab")
def main() -> None:
    """Spoken-dialog context management lab: synthesis, runs, and evaluation."""
    _configure_logging()


@main.command("synth")
@click.option("--seed", type=int, default=0, show_default=True, help="Corpus seed.")
@click.option("--n-dialogues", type=int, default=8, show_default=True)
@click.option("--turns-per-dialogue", type=int, default=8, show_default=True)
@click.option("--feature-dim", type=int, default=16, show_default=True)
@click.option("--slots-per-dialogue", type=int, default=4, show_default=True)
@click.option("--noise-sigma", type=float, default=0.0, show_default=True)
@click.option(
    "--mentions-per-turn",
    type=int,
    default=None,
    help="Force every user turn to mention this many pairs (uniform-length turns).",
)
@click.option("--fixed-domain", type=str, default=None, help="Use one domain for every dialogue.")
@click.option("--frames-per-token", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output corpus directory.")
def cmd_synth(
    seed: int,
    n_dialogues: int,
    turns_per_dialogue: int,
    feature_dim: int,
    slots_per_dialogue: int,
    noise_sigma: float,
    mentions_per_turn: int | None,
    fixed_domain: str | None,
    frames_per_token: int,
    out: str,
) -> None:
    """Generate a synthetic corpus with feature sidecars."""
    try:
        config = SynthConfig(
            n_dialogues=n_dialogues,
            turns_per_dialogue=turns_per_dialogue,
            feature_dim=feature_dim,
            slots_per_dialogue=slots_per_dialogue,
            noise_sigma=noise_sigma,
            mentions_per_turn=mentions_per_turn,
            fixed_domain=fixed_domain,
            frames_per_token=frames_per_token,
        )
        config.validate()
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    dialogues = synth_corpus(seed, config)
    path = write_corpus(
        out,
        dialogues,
        taxonomy=synthetic_taxonomy(),
        meta={"seed": seed, "config": config.to_json_obj()},
    )
    click.echo(f"wrote {len(dialogues)} dialogues to {path}")


@main.command("run")
@click.option("--manifest", type=click.Path(exists=True), default=None, help="Run manifest JSON; flags override fields.")
@click.option("--corpus", type=click.Path(), default=None, help="Corpus path (file or directory).")
@click.option("--format", "format_", type=click.Choice(["synthetic_json", "spokenwoz_json"]), default=None)
@click.option("--strategy", type=click.Choice(sorted(_STRATEGY_ALIASES)), default=None)
@click.option("--predictor", type=click.Choice(["exact", "noisy", "truncated"]), default=None)
@click.option("--seed", type=int, default=None, help="Seed for predictor noise and parameter init.")
@click.option("--n-queries", type=int, default=None, help="Compressor query count.")
@click.option("--compress-current/--no-compress-current", default=None, help="Also compress the current turn (ablation).")
@click.option("--exclude-ids", type=str, default=None, help="Comma-separated ids or a JSON file; defaults to the packaged list.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--workers", type=int, default=None, help="Parallel dialogue workers.")
@click.option("--budget-rows", type=int, default=None, help="Row budget for the truncated predictor.")
@click.option("--agent-asr", type=click.Path(exists=True), default=None, help="NDJSON sidecar of agent-turn ASR texts for multimodal history.")
def cmd_run(
    manifest: str | None,
    corpus: str | None,
    format_: str | None,
    strategy: str | None,
    predictor: str | None,
    seed: int | None,
    n_queries: int | None,
    compress_current: bool | None,
    exclude_ids: str | None,
    out: str | None,
    workers: int | None,
    budget_rows: int | None,
    agent_asr: str | None,
) -> None:
    """Run a predictor over a corpus and write NDJSON predictions."""
    if manifest:
        run_manifest = RunManifest.from_file(manifest)
    else:
        if not corpus or not strategy:
            raise click.UsageError("--corpus and --strategy are required without --manifest")
        run_manifest = RunManifest(corpus=corpus, strategy=strategy)
    overrides = {
        "corpus": corpus,
        "format": format_,
        "strategy": strategy,
        "predictor": predictor,
        "seed": seed,
        "n_queries": n_queries,
        "compress_current": compress_current,
        "out": out,
        "workers": workers,
        "budget_rows": budget_rows,
        "agent_asr": agent_asr,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(run_manifest, key, value)
    if exclude_ids is not None or not run_manifest.exclude_ids:
        run_manifest.exclude_ids = _parse_exclude_ids(exclude_ids)

    strategy_enum = run_manifest.resolved_strategy()
    dialogues = _load_run_corpus(run_manifest)
    if not dialogues:
        raise click.ClickException("no dialogues left after filtering")
    d_feat = _feature_dim(dialogues)
    embedder, config = _build_embedder(run_manifest, d_feat)
    compressor = build_compressor(config) if strategy_enum is Strategy.COMPRESSED_SPOKEN else None
    predictor_obj = make_predictor(
        run_manifest.predictor,
        seed=run_manifest.seed,
        **(
            {"budget_rows": run_manifest.budget_rows}
            if run_manifest.predictor == "truncated"
            else {}
        ),
        **(
            {
                "drop_prob": run_manifest.drop_prob,
                "typo_prob": run_manifest.typo_prob,
                "insert_prob": run_manifest.insert_prob,
                "time_reformat_prob": run_manifest.time_reformat_prob,
            }
            if run_manifest.predictor == "noisy"
            else {}
        ),
    )
    agent_texts = _load_agent_texts(run_manifest.agent_asr)

    tasks = [
        (
            dlg,
            strategy_enum,
            predictor_obj,
            embedder,
            compressor,
            run_manifest.compress_current,
            agent_texts.get(dlg.id),
        )
        for dlg in sorted(dialogues, key=lambda d: d.id)
    ]
    if run_manifest.workers > 1:
        with ProcessPoolExecutor(max_workers=run_manifest.workers) as pool:
            outcomes = list(pool.map(_execute_dialogue, tasks))
    else:
        outcomes = [_execute_dialogue(task) for task in tasks]

    outcomes.sort(key=lambda item: item[0])
    records: list[PredictionRecord] = []
    failures: list[dict] = []
    for dialogue_id, results, error in outcomes:
        if error is not None:
            failures.append({"dialogue_id": dialogue_id, "error": error})
            continue
        for result in sorted(results, key=lambda r: r.turn_index):
            records.append(
                PredictionRecord(
                    dialogue_id=dialogue_id,
                    turn_index=result.turn_index,
                    raw_output=result.raw_output,
                    parsed_state=None if result.parse_failed else result.state,
                    diagnostics=result.diagnostics,
                )
            )

    out_dir = Path(run_manifest.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.ndjson", records)
    failed_ids = {f["dialogue_id"] for f in failures}
    length_rows = context_length_report(
        [d for d in dialogues if d.id not in failed_ids],
        [strategy_enum],
        [run_manifest.n_queries],
        embedder,
    )
    with open(out_dir / "context_lengths.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(render_context_lengths(length_rows))
    summary = {
        "n_dialogues": len(dialogues),
        "n_records": len(records),
        "failures": failures,
        "manifest": asdict(run_manifest),
    }
    with open(out_dir / "run_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {len(records)} prediction records to {out_dir / 'predictions.ndjson'}")
    if failures:
        click.echo(f"{len(failures)} dialogue(s) failed; see run_summary.json", err=True)


@main.command("evaluate")
@click.option("--predictions", type=click.Path(exists=True), required=True, help="NDJSON prediction file.")
@click.option("--corpus", type=click.Path(exists=True), required=True, help="Reference corpus path.")
@click.option("--format", "format_", type=click.Choice(["synthetic_json", "spokenwoz_json"]), default="synthetic_json", show_default=True)
@click.option("--policy", type=str, default="standard", show_default=True, help="'standard', 'exact', or a policy JSON file.")
@click.option("--exclude-ids", type=str, default=None, help="Comma-separated ids or a JSON file; defaults to the packaged list.")
@click.option("--out", type=click.Path(), default=None, help="Report output directory.")
@click.option("--top-k-errors", type=int, default=6, show_default=True)
def cmd_evaluate(
    predictions: str,
    corpus: str,
    format_: str,
    policy: str,
    exclude_ids: str | None,
    out: str | None,
    top_k_errors: int,
) -> None:
    """Score predictions against gold states; print JGA with and without post-processing."""
    records = read_predictions(predictions)
    dialogues = filter_corrupted(load_corpus(corpus, format_), _parse_exclude_ids(exclude_ids))
    taxonomy = None
    if format_ == "synthetic_json":
        taxonomy = load_taxonomy(corpus) or synthetic_taxonomy()
    policy_obj = load_policy(policy)
    try:
        report = evaluate(
            states_from_records(records),
            references_from_corpus(dialogues),
            policy_obj,
            taxonomy,
            top_k_errors,
        )
    except AlignmentError as exc:
        click.echo(f"alignment failure: {exc}", err=True)
        sys.exit(2)
    click.echo(f"JGA (exact match):     {report.jga:.4f}")
    click.echo(f"JGA (post-processed):  {report.jga_post:.4f}")
    click.echo(f"domain-set accuracy:   {report.domain_accuracy:.4f}")
    if out:
        written = render_report(report, {"json", "csv", "svg"}, out)
        click.echo(f"wrote {len(written)} report files to {out}")


@main.command("gradcheck")
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--threshold", type=float, default=1e-4, show_default=True)
def cmd_gradcheck(eps: float, threshold: float) -> None:
    """Verify analytic gradients against central finite differences."""
    results = grad_check_suite(eps=eps)
    failed = False
    for result in results:
        status = "PASS" if result.max_relative_error < threshold else "FAIL"
        if status == "FAIL":
            failed = True
        click.echo(
            f"{status} {result.module:<11} input={result.input_shape!s:<9} "
            f"max_rel_err={result.max_relative_error:.3e} worst={result.worst_param}"
        )
    if failed:
        raise SystemExit(1)


@main.command("probe")
@click.option("--n-queries", "n_queries_list", type=int, multiple=True, help="Query counts to probe; repeatable.")
@click.option("--seeds", type=str, default="0,1,2,3,4", show_default=True, help="Comma-separated corpus/training seeds.")
@click.option("--n-dialogues", type=int, default=60, show_default=True)
@click.option("--turns-per-dialogue", type=int, default=10, show_default=True)
@click.option("--feature-dim", type=int, default=16, show_default=True)
@click.option("--noise-sigma", type=float, default=0.5, show_default=True)
@click.option("--slots-per-dialogue", type=int, default=4, show_default=True)
@click.option("--fixed-domain", type=str, default="hotel", show_default=True)
@click.option("--lr", type=float, default=0.2, show_default=True)
@click.option("--epochs", type=int, default=600, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Retention CSV path.")
def cmd_probe(
    n_queries_list: tuple[int, ...],
    seeds: str,
    n_dialogues: int,
    turns_per_dialogue: int,
    feature_dim: int,
    noise_sigma: float,
    slots_per_dialogue: int,
    fixed_domain: str,
    lr: float,
    epochs: int,
    out: str,
) -> None:
    """Slot-recovery accuracy as a function of compressor query count."""
    seed_values = [int(s) for s in seeds.split(",") if s.strip()]
    rows: list[tuple[int, int, float]] = []
    for seed in seed_values:
        if not n_queries_list:
            break
        config = SynthConfig(
            n_dialogues=n_dialogues,
            turns_per_dialogue=turns_per_dialogue,
            feature_dim=feature_dim,
            slots_per_dialogue=slots_per_dialogue,
            noise_sigma=noise_sigma,
            mentions_per_turn=slots_per_dialogue,
            fixed_domain=fixed_domain,
        )
        corpus_dialogues = synth_corpus(seed, config)
        hyper = ProbeHyper(lr=lr, epochs=epochs, seed=seed)
        accuracies = probe_retention(corpus_dialogues, list(n_queries_list), hyper)
        for n_queries in n_queries_list:
            rows.append((seed, n_queries, accuracies[n_queries]))
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_retention_table(rows))
    click.echo(f"wrote {len(rows)} probe rows to {out_path}")


if __name__ == "__main__":
    main()
