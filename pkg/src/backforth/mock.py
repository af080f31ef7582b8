"""Scripted in-process endpoint double.

A fixture is a JSON object::

    {
      "rules": [
        {"pattern": "regex searched in the prompt",
         "responses": ["text with \\\\1 backrefs", {"fail": "server"}, ...]},
        ...
      ],
      "default": "completion when no rule matches" | {"fail": "client"},
      "latency_ms": 0,
      "call_log": "optional/path/appended/one/line/per/call",
      "embedding_dim": 8
    }

The n-th call with a given prompt receives ``responses[n]`` of the first
matching rule (the last entry repeats), so outcomes do not depend on thread
scheduling. Failure kinds: ``server`` (retryable 5xx), ``timeout``,
``malformed`` (unparseable body, retryable) and ``client`` (4xx, final).
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from backforth.gateway import EndpointConfig, SamplingParams, TransportError

_FAILURES = {
    "server": ("HTTP 503: scripted server error", True),
    "timeout": ("ReadTimeout: scripted timeout", True),
    "malformed": ("malformed completion body: scripted", True),
    "client": ("HTTP 400: scripted client error", False),
}


class ScriptedMock:
    def __init__(
        self,
        rules: Sequence[tuple[str, Sequence[Any]] | dict] = (),
        default: Any = None,
        latency_ms: float = 0.0,
        call_log: str | Path | None = None,
        embedding_dim: int = 8,
    ):
        self.rules: list[tuple[re.Pattern, list[Any]]] = []
        for rule in rules:
            if isinstance(rule, dict):
                pattern, responses = rule["pattern"], rule["responses"]
            else:
                pattern, responses = rule
            if isinstance(responses, (str, dict)):
                responses = [responses]
            if not responses:
                raise ValueError(f"rule {pattern!r} has no responses")
            self.rules.append((re.compile(pattern, re.DOTALL), list(responses)))
        self.default = default
        self.latency = latency_ms / 1000.0
        self.call_log = Path(call_log) if call_log else None
        self.embedding_dim = embedding_dim

        self._lock = threading.Lock()
        self._seen: Counter[str] = Counter()
        self.calls = 0
        self.prompts: list[str] = []
        self.in_flight = 0
        self.peak_in_flight = 0

    @classmethod
    def from_dict(cls, spec: dict, base_dir: Path | None = None) -> ScriptedMock:
        call_log = spec.get("call_log")
        if call_log and base_dir is not None and not Path(call_log).is_absolute():
            call_log = base_dir / call_log
        return cls(
            rules=spec.get("rules", []),
            default=spec.get("default"),
            latency_ms=spec.get("latency_ms", 0.0),
            call_log=call_log,
            embedding_dim=spec.get("embedding_dim", 8),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedMock:
        path = Path(path)
        try:
            spec = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot load mock fixture {path}: {exc}") from exc
        return cls.from_dict(spec, base_dir=path.parent)

    def reset_counters(self) -> None:
        with self._lock:
            self._seen.clear()
            self.calls = 0
            self.prompts.clear()
            self.peak_in_flight = 0

    def _outcome(self, prompt: str) -> Any:
        with self._lock:
            n = self._seen[prompt]
            self._seen[prompt] += 1
            self.calls += 1
            self.prompts.append(prompt)
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            if self.call_log is not None:
                with open(self.call_log, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"n": n, "prompt_sha1": hashlib.sha1(prompt.encode()).hexdigest()}) + "\n")
        for pattern, responses in self.rules:
            m = pattern.search(prompt)
            if m:
                out = responses[min(n, len(responses) - 1)]
                return m.expand(out) if isinstance(out, str) else out
        if self.default is None:
            return {"fail": "client"}
        return self.default

    def complete(self, prompt: str, params: SamplingParams, endpoint: EndpointConfig) -> str:
        try:
            outcome = self._outcome(prompt)
            if self.latency:
                time.sleep(self.latency)
            if isinstance(outcome, dict):
                if "delay" in outcome:
                    time.sleep(float(outcome["delay"]))
                kind = outcome.get("fail")
                if kind is not None:
                    message, retryable = _FAILURES.get(kind, (f"scripted failure {kind}", True))
                    raise TransportError(message, retryable=retryable)
                return str(outcome.get("text", ""))
            return str(outcome)
        finally:
            with self._lock:
                self.in_flight -= 1

    def embed(self, texts: Sequence[str], endpoint: EndpointConfig) -> list[list[float]]:
        out = []
        for t in texts:
            seed = int.from_bytes(hashlib.sha1(t.encode("utf-8")).digest()[:8], "little")
            out.append(np.random.default_rng(seed).standard_normal(self.embedding_dim).tolist())
        return out

    def tokenize(self, text: str, endpoint: EndpointConfig) -> int:
        return len(text.split())
