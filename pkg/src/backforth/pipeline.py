"""Stage orchestration over the checkpoint ledger.

Every stage reads the live ledger, picks the records eligible for it, and
appends one ledger entry per record transition. Records a previous run
already finished are never re-sent to an endpoint, so a killed run can be
resumed by simply running the stage again.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from backforth import dataset as ds
from backforth import stages as st
from backforth.config import PipelineConfig
from backforth.corpus import IngestStats, expand_sources, filter_by_length, reservoir_sample, stream_documents
from backforth.gateway import EndpointConfig, LlmResult, complete_batch
from backforth.ledger import Ledger
from backforth.mauve import compute_mauve
from backforth.prompts import DEFAULT_TEMPLATES, PromptTemplate
from backforth.stages import CandidatePair, Status
from backforth.stats import length_stats, score_histogram, unique_trigrams

logger = logging.getLogger(__name__)

STAGES = ("ingest", "backtranslate", "score", "filter", "rewrite", "distill", "build", "analyze")

Checkpoint = Callable[[str, int], None]


class StageAborted(RuntimeError):
    """Too many consecutive endpoint failures; the ledger stays resumable."""


@dataclass
class StageSummary:
    stage: str
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _template(cfg: PipelineConfig, stage: str) -> PromptTemplate:
    path = cfg.templates.get(stage)
    return PromptTemplate.from_file(path, stage) if path else DEFAULT_TEMPLATES[stage]


def _selected(cfg: PipelineConfig, pair: CandidatePair) -> bool:
    """Whether a pair belongs to the curated set the later stages work on."""
    if pair.instruction is None or pair.status in (Status.INGESTED, Status.FILTERED_OUT):
        return False
    return pair.score == 5 if cfg.stages.filtering else True


def _eligible(cfg: PipelineConfig, stage: str, pair: CandidatePair) -> bool:
    if stage == "backtranslate":
        return pair.status is Status.INGESTED
    if stage == "score":
        return pair.status is Status.BACKTRANSLATED
    if stage == "filter":
        return pair.status is Status.SCORED
    if stage == "rewrite":
        return pair.status in (Status.SCORED, Status.BACKTRANSLATED) and _selected(cfg, pair)
    if stage == "distill":
        if pair.response_distilled is not None or not _selected(cfg, pair):
            return False
        if cfg.stages.rewriting:
            return pair.status in (Status.REWRITTEN, Status.REWRITE_FAILED)
        return pair.status in (Status.SCORED, Status.BACKTRANSLATED)
    raise ValueError(stage)


# --------------------------------------------------------------------------- #
# model-driven stages
# --------------------------------------------------------------------------- #


def _run_model_stage(
    cfg: PipelineConfig,
    stage: str,
    ledger: Ledger,
    endpoint: EndpointConfig,
    on_checkpoint: Checkpoint | None,
) -> StageSummary:
    params = cfg.sampling[stage]
    if stage == "backtranslate":
        tpl = _template(cfg, stage)
        make = lambda p: st.backtranslation_request(p, params, tpl)  # noqa: E731
        apply = st.apply_backtranslation
    elif stage == "score":
        tpl = _template(cfg, stage)
        make = lambda p: st.scoring_request(p, params, tpl)  # noqa: E731
        apply = st.apply_score
    elif stage == "rewrite":
        tpl = _template(cfg, stage)
        make = lambda p: st.rewrite_request(p, params, tpl)  # noqa: E731
        apply = None
    else:
        make = lambda p: st.distill_request(p, params)  # noqa: E731
        apply = st.apply_distill

    pairs = ledger.pairs()
    todo = [p for p in pairs if _eligible(cfg, stage, p)]
    summary = StageSummary(stage, processed=len(todo), skipped=len(pairs) - len(todo))
    batch_size = cfg.limits.batch_size or endpoint.max_concurrency * 4
    threshold = cfg.limits.consecutive_failure_threshold
    consecutive = 0
    written = 0

    for start in range(0, len(todo), batch_size):
        batch = todo[start : start + batch_size]
        requests_ = [make(p) for p in batch]
        results = complete_batch(requests_, endpoint)
        if stage == "rewrite":
            updated = _finish_rewrites(batch, requests_, results, endpoint)
        else:
            updated = [apply(p, r) for p, r in zip(batch, results)]

        ledger.extend(updated)
        written += len(updated)
        for pair in updated:
            if pair.failed:
                summary.failed += 1
                consecutive += 1
            else:
                summary.succeeded += 1
                consecutive = 0
        if on_checkpoint is not None:
            on_checkpoint(stage, written)
        if consecutive >= threshold:
            raise StageAborted(
                f"{stage}: {consecutive} consecutive endpoint failures; aborting (resume once the endpoint recovers)"
            )
    logger.info("%s: %s", stage, summary)
    return summary


def _finish_rewrites(batch, requests_, results: list[LlmResult], endpoint) -> list[CandidatePair]:
    first = [st.apply_rewrite(p, r, final=False) for p, r in zip(batch, results)]
    retry_idx = [i for i, out in enumerate(first) if out is None]
    if retry_idx:
        second = complete_batch([requests_[i] for i in retry_idx], endpoint)
        for i, r in zip(retry_idx, second):
            first[i] = st.apply_rewrite(batch[i], r, final=True)
    return first


# --------------------------------------------------------------------------- #
# data stages
# --------------------------------------------------------------------------- #


def _run_ingest(cfg: PipelineConfig, ledger: Ledger, strict: bool) -> StageSummary:
    c = cfg.corpus
    estimator_endpoint = cfg.endpoints.get("tokenizer")
    stream_stats = IngestStats()

    def docs():
        for path in expand_sources(c.path):
            yield from stream_documents(
                path,
                c.label,
                text_field=c.text_field,
                id_field=c.id_field,
                estimator=c.estimator,
                estimator_endpoint=estimator_endpoint,
                strict=strict or c.strict,
                stats=stream_stats,
            )

    kept, length_stats_ = filter_by_length(docs(), c.max_tokens)
    if cfg.limits.max_pairs is not None:
        kept = reservoir_sample(kept, cfg.limits.max_pairs, cfg.seeds.sample_seed)
    kept.sort(key=lambda d: d.id)

    summary = StageSummary("ingest")
    seen: set[str] = set()
    new = []
    for doc in kept:
        if doc.id in seen:
            logger.warning("duplicate document id %s; keeping the first", doc.id)
            continue
        seen.add(doc.id)
        if doc.id in ledger:
            summary.skipped += 1
            continue
        new.append(CandidatePair.from_document(doc))
    ledger.extend(new, attempted=False)
    summary.processed = summary.succeeded = len(new)
    summary.extra = {
        "read_count": stream_stats.read_count,
        "malformed": stream_stats.malformed,
        "dropped_empty": stream_stats.dropped_empty,
        "dropped_too_long": length_stats_.dropped_too_long,
        "kept_after_length_filter": length_stats_.kept_count,
        "sampled": len(kept),
    }
    return summary


def _run_filter(cfg: PipelineConfig, ledger: Ledger) -> StageSummary:
    pairs = ledger.pairs()
    todo = [p for p in pairs if _eligible(cfg, "filter", p)]
    kept = ds.filter_score5(todo)
    dropped = [ds.mark_filtered(p) for p in todo if p.score != 5]
    ledger.extend(dropped, attempted=False)
    return StageSummary(
        "filter",
        processed=len(todo),
        succeeded=len(todo),
        skipped=len(pairs) - len(todo),
        extra={"kept": len(kept), "filtered_out": len(dropped)},
    )


def load_seeds(cfg: PipelineConfig) -> list[ds.SeedPair]:
    if not cfg.seed_data.path:
        return []
    trees = ds.load_conversation_trees(cfg.seed_data.path, cfg.seed_data.format)
    return ds.prepare_seed_pairs(trees, cfg.seed_data.limit)


def dataset_variants(cfg: PipelineConfig) -> list[str]:
    variants = []
    if cfg.stages.rewriting:
        variants.append("rewritten")
    if cfg.stages.distilling:
        variants.append("distilled")
    return variants or ["initial"]


def dataset_path(cfg: PipelineConfig, variant: str) -> Path:
    return Path(cfg.paths.output_dir) / f"dataset_{variant}.jsonl"


def _run_build(cfg: PipelineConfig, ledger: Ledger, strict: bool) -> StageSummary:
    seeds = load_seeds(cfg)
    selected = [p for p in ledger.pairs() if _selected(cfg, p)]
    summary = StageSummary("build", processed=len(selected))
    counts = {}
    for variant in dataset_variants(cfg):
        records = ds.build_finetune_dataset(selected, seeds, variant, strict=strict)
        path = dataset_path(cfg, variant)
        counts[variant] = {"path": str(path), "count": ds.export_jsonl(records, path), "seeds": len(seeds)}
    summary.succeeded = len(selected)
    summary.extra = {"datasets": counts}
    return summary


def _mauve_entry(cfg: PipelineConfig, a: Sequence[str], b: Sequence[str]) -> dict:
    endpoint = cfg.endpoints.get("embedder")
    reports = [compute_mauve(a, b, cfg.mauve_config(i), embedder_endpoint=endpoint) for i in range(cfg.analysis.mauve_repeats)]
    scores = [r.score for r in reports]
    return {
        "score_mean": statistics.fmean(scores),
        "score_sd": statistics.stdev(scores) if len(scores) > 1 else 0.0,
        "scores": scores,
        "k_used": reports[0].k_used,
        "sample_sizes": list(reports[0].sample_sizes),
        "curve": [list(pt) for pt in reports[0].curve.points],
    }


def analyze(cfg: PipelineConfig, pairs: Sequence[CandidatePair]) -> dict:
    a = cfg.analysis
    seed = cfg.seeds.sample_seed
    report: dict = {
        "config": {**asdict(a), "kmeans_seed": cfg.seeds.kmeans_seed, "sample_seed": seed},
        "pairs": {"total": len(pairs)},
    }
    scored = [p for p in pairs if p.score_raw is not None]
    if scored:
        report["score_histogram"] = score_histogram(scored)

    selected = [p for p in pairs if _selected(cfg, p)]
    report["pairs"]["selected"] = len(selected)
    responses = {
        "initial": [p.response_initial for p in selected],
        "rewritten": [p.response_rewritten for p in selected if p.response_rewritten],
        "distilled": [p.response_distilled for p in selected if p.response_distilled],
    }
    if selected:
        report["unique_trigrams"] = {
            "instructions": unique_trigrams([p.instruction for p in selected], a.trigram_sample, seed),
            **{
                f"responses_{k}": unique_trigrams(v, a.trigram_sample, seed)
                for k, v in responses.items()
                if v
            },
        }
        report["length_stats"] = {}
        for k, attr in ds.RESPONSE_FIELDS.items():
            rows = [(p.instruction, getattr(p, attr)) for p in selected if getattr(p, attr)]
            if rows:
                mi, mr = length_stats(rows, a.length_estimator, cfg.endpoints.get("tokenizer"))
                report["length_stats"][k] = {"instruction": mi, "response": mr, "records": len(rows)}

    mauve: dict = {}
    both = lambda f1, f2: [p for p in selected if getattr(p, f1) and getattr(p, f2)]  # noqa: E731
    for left, right in (("initial", "rewritten"), ("initial", "distilled"), ("rewritten", "distilled")):
        rows = both(ds.RESPONSE_FIELDS[left], ds.RESPONSE_FIELDS[right])
        if len(rows) >= 2:
            mauve[f"{left}_vs_{right}"] = _mauve_entry(
                cfg, [getattr(p, ds.RESPONSE_FIELDS[left]) for p in rows], [getattr(p, ds.RESPONSE_FIELDS[right]) for p in rows]
            )
    distilled = responses["distilled"]
    if len(distilled) >= 4:
        half = len(distilled) // 2
        mauve["distilled_split"] = _mauve_entry(cfg, distilled[:half], distilled[half : 2 * half])
    report["mauve"] = mauve
    return report


def _run_analyze(cfg: PipelineConfig, ledger: Ledger) -> StageSummary:
    pairs = ledger.pairs()
    report = analyze(cfg, pairs)
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "analysis_report.json"
    if cfg.analysis.frontier_csv:
        for name, entry in report["mauve"].items():
            with open(out / f"frontier_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y"])
                w.writerows(entry["curve"])
    if not cfg.analysis.frontier_csv:
        for entry in report["mauve"].values():
            entry.pop("curve")
    path.write_text(json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return StageSummary("analyze", processed=len(pairs), succeeded=len(pairs), extra={"report": str(path)})


# --------------------------------------------------------------------------- #
# entry points
# --------------------------------------------------------------------------- #


def run_stage(
    cfg: PipelineConfig,
    stage: str,
    ledger: Ledger,
    *,
    strict: bool = False,
    on_checkpoint: Checkpoint | None = None,
) -> StageSummary:
    if stage == "ingest":
        return _run_ingest(cfg, ledger, strict)
    if stage == "backtranslate":
        return _run_model_stage(cfg, stage, ledger, cfg.endpoint("backward"), on_checkpoint)
    if stage == "score":
        return _run_model_stage(cfg, stage, ledger, cfg.endpoint("forward"), on_checkpoint)
    if stage == "filter":
        return _run_filter(cfg, ledger)
    if stage in ("rewrite", "distill"):
        return _run_model_stage(cfg, stage, ledger, cfg.endpoint("rewriter"), on_checkpoint)
    if stage == "build":
        return _run_build(cfg, ledger, strict)
    if stage == "analyze":
        return _run_analyze(cfg, ledger)
    raise ValueError(f"unknown stage {stage!r} (known: {', '.join(STAGES)})")


def planned_stages(cfg: PipelineConfig) -> list[str]:
    plan = ["ingest", "backtranslate"]
    if cfg.stages.filtering:
        plan += ["score", "filter"]
    if cfg.stages.rewriting:
        plan.append("rewrite")
    if cfg.stages.distilling:
        plan.append("distill")
    return plan + ["build", "analyze"]


def manifest_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.paths.output_dir) / "manifest.json"


def run_all(
    cfg: PipelineConfig,
    *,
    force: bool = False,
    strict: bool = False,
    on_checkpoint: Checkpoint | None = None,
) -> dict:
    """Run every enabled stage in order and write ``manifest.json``.

    A fatal error stops the sequence; the manifest still records the stages
    that finished before re-raising.
    """
    manifest: dict = {"config_hash": cfg.config_hash(), "status": "running", "stages": {}, "datasets": {}}
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with Ledger(cfg.paths.ledger, cfg.config_hash(), force=force) as ledger:
            for stage in planned_stages(cfg):
                summary = run_stage(cfg, stage, ledger, strict=strict, on_checkpoint=on_checkpoint)
                manifest["stages"][stage] = summary.to_dict()
                if stage == "build":
                    manifest["datasets"] = summary.extra["datasets"]
                if stage == "analyze":
                    manifest["analysis_report"] = summary.extra["report"]
        manifest["status"] = "complete"
    except BaseException as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest_path(cfg).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def ledger_status(path: str | Path) -> dict:
    from backforth.ledger import replay

    header, live = replay(path)
    by_status: dict[str, int] = {}
    failing = 0
    for entry in live.values():
        by_status[entry.status.value] = by_status.get(entry.status.value, 0) + 1
        failing += entry.payload.failed
    return {
        "ledger": str(path),
        "config_hash": (header or {}).get("config_hash"),
        "records": len(live),
        "by_status": dict(sorted(by_status.items())),
        "pending_retry": failing,
    }


def prepare_seed_files(cfg: PipelineConfig) -> dict:
    seeds = load_seeds(cfg)
    out = Path(cfg.paths.output_dir)
    counts = {}
    for direction in ("forward", "backward"):
        path = out / f"seed_{direction}.jsonl"
        counts[direction] = {"path": str(path), "count": ds.emit_direction_training(seeds, direction, path)}
    return counts

