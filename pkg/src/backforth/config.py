"""Pipeline configuration: JSON file -> validated :class:`PipelineConfig`.

Parsing is strict. Unknown keys at any level are rejected so that a typo
such as ``"endponts"`` fails loudly instead of silently falling back to
defaults. Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from backforth.corpus import DEFAULT_ESTIMATOR, DEFAULT_MAX_TOKENS, EstimatorError, check_estimator
from backforth.gateway import EndpointConfig, SamplingParams
from backforth.mauve import MauveConfig
from backforth.stages import DISTILL_PARAMS, INSTRUCTION_PARAMS, REWRITE_PARAMS, SCORE_PARAMS

ROLES = ("backward", "forward", "rewriter", "tokenizer", "embedder")
MODEL_STAGES = ("backtranslate", "score", "rewrite", "distill")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    path: list[str]
    text_field: str = "text"
    id_field: str = "id"
    label: str | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    estimator: str = DEFAULT_ESTIMATOR
    strict: bool = False


@dataclass(frozen=True)
class StageFlags:
    filtering: bool = True
    rewriting: bool = True
    distilling: bool = False


@dataclass(frozen=True)
class Seeds:
    sample_seed: int = 0
    kmeans_seed: int = 0


@dataclass(frozen=True)
class Limits:
    max_pairs: int | None = None
    consecutive_failure_threshold: int = 20
    batch_size: int | None = None


@dataclass(frozen=True)
class Paths:
    ledger: str
    output_dir: str


@dataclass(frozen=True)
class SeedData:
    path: str | None = None
    limit: int = 3200
    format: str = "tree"


@dataclass(frozen=True)
class AnalysisConfig:
    embedder: str = "hashed-bow"
    num_clusters: int | str = "auto"
    scaling_constant: float = 5.0
    grid_size: int = 25
    kmeans_max_iters: int = 300
    mauve_repeats: int = 3
    trigram_sample: int = 1000
    length_estimator: str = "whitespace"
    frontier_csv: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusConfig
    endpoints: dict[str, EndpointConfig]
    paths: Paths
    stages: StageFlags = StageFlags()
    sampling: dict[str, SamplingParams] = field(default_factory=dict)
    seeds: Seeds = Seeds()
    limits: Limits = Limits()
    templates: dict[str, str] = field(default_factory=dict)
    seed_data: SeedData = SeedData()
    analysis: AnalysisConfig = AnalysisConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def endpoint(self, role: str) -> EndpointConfig:
        try:
            return self.endpoints[role]
        except KeyError:
            raise ConfigError(f"no endpoint configured for role {role!r}") from None

    def mauve_config(self, seed_offset: int = 0) -> MauveConfig:
        a = self.analysis
        return MauveConfig(
            num_clusters=a.num_clusters,
            scaling_constant=a.scaling_constant,
            grid_size=a.grid_size,
            kmeans_seed=self.seeds.kmeans_seed + seed_offset,
            kmeans_max_iters=a.kmeans_max_iters,
            embedder=a.embedder,
        )


_DEFAULT_SAMPLING = {
    "backtranslate": INSTRUCTION_PARAMS,
    "score": SCORE_PARAMS,
    "rewrite": REWRITE_PARAMS,
    "distill": DISTILL_PARAMS,
}

_TOP_LEVEL = {"corpus", "endpoints", "stages", "sampling", "seeds", "limits", "paths", "templates", "seed_data", "analysis"}


def _section(raw: Any, cls, where: str, **overrides):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = set(cls.__dataclass_fields__)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")
    try:
        return cls(**{**raw, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    path = Path(p).expanduser()
    return str(path if path.is_absolute() else (base / path))


def parse_config(raw: dict, base_dir: str | Path = ".") -> PipelineConfig:
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)} (allowed: {', '.join(sorted(_TOP_LEVEL))})")
    if "corpus" not in raw:
        raise ConfigError("missing required section 'corpus'")

    corpus_raw = dict(raw["corpus"]) if isinstance(raw["corpus"], dict) else raw["corpus"]
    if not isinstance(corpus_raw, dict) or "path" not in corpus_raw:
        raise ConfigError("corpus: 'path' is required")
    paths_in = corpus_raw["path"]
    paths_in = [paths_in] if isinstance(paths_in, str) else list(paths_in)
    corpus = _section(corpus_raw, CorpusConfig, "corpus", path=[_resolve(base, p) for p in paths_in])
    try:
        check_estimator(corpus.estimator)
    except EstimatorError as exc:
        raise ConfigError(f"corpus: {exc}") from exc

    endpoints_raw = raw.get("endpoints") or {}
    if not isinstance(endpoints_raw, dict):
        raise ConfigError("endpoints: expected an object keyed by role")
    bad_roles = sorted(set(endpoints_raw) - set(ROLES))
    if bad_roles:
        raise ConfigError(f"endpoints: unknown role(s) {', '.join(bad_roles)} (allowed: {', '.join(ROLES)})")
    endpoints = {}
    for role, ep in endpoints_raw.items():
        if isinstance(ep, dict) and isinstance(ep.get("base_url"), str) and ep["base_url"].startswith("mock://"):
            target = ep["base_url"][len("mock://"):]
            if target.endswith(".json"):
                ep = {**ep, "base_url": "mock://" + _resolve(base, target)}
        endpoints[role] = _section(ep, EndpointConfig, f"endpoints.{role}")

    stages = _section(raw.get("stages"), StageFlags, "stages")

    sampling_raw = raw.get("sampling") or {}
    bad = sorted(set(sampling_raw) - set(MODEL_STAGES))
    if bad:
        raise ConfigError(f"sampling: unknown stage(s) {', '.join(bad)} (allowed: {', '.join(MODEL_STAGES)})")
    sampling = {}
    for stage in MODEL_STAGES:
        default = asdict(_DEFAULT_SAMPLING[stage])
        given = sampling_raw.get(stage) or {}
        sampling[stage] = _section({**default, **given} if isinstance(given, dict) else given, SamplingParams, f"sampling.{stage}")

    templates_raw = raw.get("templates") or {}
    bad = sorted(set(templates_raw) - {"backtranslate", "score", "rewrite"})
    if bad:
        raise ConfigError(f"templates: unknown stage(s) {', '.join(bad)}")
    templates = {k: _resolve(base, v) for k, v in templates_raw.items()}

    paths_raw = raw.get("paths") or {}
    paths_full = {"ledger": "run/ledger.jsonl", "output_dir": "run", **paths_raw} if isinstance(paths_raw, dict) else paths_raw
    paths = _section(paths_full, Paths, "paths")
    paths = Paths(ledger=_resolve(base, paths.ledger), output_dir=_resolve(base, paths.output_dir))

    seed_data = _section(raw.get("seed_data"), SeedData, "seed_data")
    if seed_data.path is not None:
        seed_data = SeedData(_resolve(base, seed_data.path), seed_data.limit, seed_data.format)
    if seed_data.format not in ("tree", "oasst"):
        raise ConfigError("seed_data.format must be 'tree' or 'oasst'")

    analysis = _section(raw.get("analysis"), AnalysisConfig, "analysis")
    try:
        check_estimator(analysis.length_estimator)
    except EstimatorError as exc:
        raise ConfigError(f"analysis: {exc}") from exc

    cfg = PipelineConfig(
        corpus=corpus,
        endpoints=endpoints,
        paths=paths,
        stages=stages,
        sampling=sampling,
        seeds=_section(raw.get("seeds"), Seeds, "seeds"),
        limits=_section(raw.get("limits"), Limits, "limits"),
        templates=templates,
        seed_data=seed_data,
        analysis=analysis,
    )
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    needs = [("backward", "backtranslate")]
    if cfg.stages.filtering:
        needs.append(("forward", "score"))
    if cfg.stages.rewriting:
        needs.append(("rewriter", "rewrite"))
    if cfg.stages.distilling:
        needs.append(("rewriter", "distill"))
    if cfg.corpus.estimator == "remote":
        needs.append(("tokenizer", "ingest"))
    if cfg.analysis.embedder == "remote":
        needs.append(("embedder", "analyze"))
    for role, stage in needs:
        if role not in cfg.endpoints:
            raise ConfigError(f"stage {stage!r} is enabled but no {role!r} endpoint is configured")
    if cfg.corpus.max_tokens < 1:
        raise ConfigError("corpus.max_tokens must be positive")
    if cfg.limits.max_pairs is not None and cfg.limits.max_pairs < 1:
        raise ConfigError("limits.max_pairs must be positive")
    if cfg.limits.consecutive_failure_threshold < 1:
        raise ConfigError("limits.consecutive_failure_threshold must be positive")
    try:
        cfg.mauve_config()
    except ValueError as exc:
        raise ConfigError(f"analysis: {exc}") from exc
    if cfg.analysis.mauve_repeats < 1 or cfg.analysis.trigram_sample < 1:
        raise ConfigError("analysis.mauve_repeats and analysis.trigram_sample must be positive")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)
