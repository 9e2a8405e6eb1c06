"""Grading, chat clients and the resample-until-acceptable benchmark loop."""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np

from .generators import PromptCase, gen_prompt

log = logging.getLogger(__name__)


class Grade(str, Enum):
    CORRECT = "Correct"
    ACCEPTABLE_WRONG = "AcceptableWrong"
    UNACCEPTABLE = "Unacceptable"


def normalize(text: str) -> str:
    """Trim, case-fold and drop trailing punctuation."""
    return text.strip().casefold().rstrip(".,;:!?\"' ").strip()


def grade(case: PromptCase, answer: str) -> Grade:
    a = normalize(answer if isinstance(answer, str) else "")
    if a == normalize(case.correct):
        return Grade.CORRECT
    if a in {normalize(x) for x in case.acceptable}:
        return Grade.ACCEPTABLE_WRONG
    return Grade.UNACCEPTABLE


# -- clients ---------------------------------------------------------------------


class TransportError(RuntimeError):
    pass


class ChatClient(Protocol):
    def complete(self, prompt: str, case: PromptCase, attempt: int) -> str: ...


@dataclass
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    token_env: str = "OPENAI_API_KEY"
    max_attempts: int = 8
    timeout: float = 60.0
    retries: int = 4
    backoff: float = 1.0
    options: dict = field(default_factory=dict)  # passed through, e.g. temperature

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


class HTTPChatClient:
    """Chat-completions style endpoint; one user message per attempt."""

    def __init__(self, cfg: ProviderConfig, sleep=time.sleep):
        self.cfg = cfg
        self.sleep = sleep
        self.token = os.environ.get(cfg.token_env)
        if not self.token:
            raise TransportError(f"environment variable {cfg.token_env} is not set")

    def _post(self, body: dict) -> dict:
        req = urllib.request.Request(
            self.cfg.base_url.rstrip("/") + "/chat/completions",
            data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.token}"},
        )
        with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
            return json.loads(resp.read().decode())

    def complete(self, prompt: str, case: PromptCase, attempt: int) -> str:
        body = {"model": self.cfg.model, "messages": [{"role": "user", "content": prompt}], **self.cfg.options}
        last = None
        for k in range(self.cfg.retries + 1):
            try:
                data = self._post(body)
                return data["choices"][0]["message"]["content"] or ""
            except urllib.error.HTTPError as exc:
                if exc.code not in (408, 409, 429) and exc.code < 500:
                    raise TransportError(f"HTTP {exc.code}: {exc.reason}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, KeyError, IndexError, ValueError) as exc:
                last = exc
            if k < self.cfg.retries:
                self.sleep(self.cfg.backoff * 2**k)
        raise TransportError(f"giving up after {self.cfg.retries + 1} tries: {last}")


class MockClient:
    """Offline stand-in: ``uniform`` guesses, ``correct`` solves, ``garbage`` babbles."""

    def __init__(self, mode: str, seed: int = 0):
        if mode not in ("uniform", "correct", "garbage"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.seed = seed

    def complete(self, prompt: str, case: PromptCase, attempt: int) -> str:
        if self.mode == "correct":
            return case.correct
        if self.mode == "garbage":
            return "banana"
        # per-case stream so threaded runs stay reproducible
        idx = case.meta.get("index", 0)
        rng = np.random.default_rng([self.seed, idx, attempt])
        return str(case.acceptable[rng.integers(len(case.acceptable))])


# -- benchmark loop --------------------------------------------------------------


@dataclass
class CaseResult:
    index: int
    case: dict
    answers: list[str]
    grades: list[str]
    final: str  # Correct | AcceptableWrong | Unacceptable | Skipped
    error: str = ""

    @property
    def attempts(self) -> int:
        return len(self.answers)


@dataclass
class FormulationResult:
    formulation: str
    n_cases: int
    n_skipped: int
    accuracy: float
    mean_attempts: float
    baseline: float


@dataclass
class BenchReport:
    results: dict[str, FormulationResult]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(FormulationResult.__dataclass_fields__))
            w.writeheader()
            for r in self.results.values():
                w.writerow(asdict(r))


def run_case(client: ChatClient, case: PromptCase, index: int, max_attempts: int) -> CaseResult:
    answers, grades = [], []
    try:
        for attempt in range(max_attempts):
            ans = client.complete(case.prompt, case, attempt)
            g = grade(case, ans)
            answers.append(ans)
            grades.append(g.value)
            if g is not Grade.UNACCEPTABLE:
                return CaseResult(index, case.to_dict(), answers, grades, g.value)
    except TransportError as exc:
        return CaseResult(index, case.to_dict(), answers, grades, "Skipped", str(exc))
    return CaseResult(index, case.to_dict(), answers, grades, Grade.UNACCEPTABLE.value)


def make_cases(formulation: str, n_cases: int, seed: int, D: int | None = None, n_chains: int = 4) -> list[PromptCase]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        c = gen_prompt(formulation, D, n_chains, rng)
        c.meta["index"] = i
        cases.append(c)
    return cases


def summarize(formulation: str, results: list[CaseResult], max_attempts: int) -> FormulationResult:
    done = [r for r in results if r.final != "Skipped"]
    n = len(done)
    correct = sum(r.final == Grade.CORRECT.value for r in done)
    return FormulationResult(
        formulation,
        len(results),
        len(results) - n,
        correct / n if n else float("nan"),
        float(np.mean([r.attempts for r in done])) if n else float("nan"),
        float(np.mean([1.0 / len(r.case["acceptable"]) for r in results])) if results else float("nan"),
    )


def run_benchmark(
    client: ChatClient,
    formulation: str,
    n_cases: int,
    seed: int,
    D: int | None = None,
    n_chains: int = 4,
    max_attempts: int = 8,
    workers: int = 4,
    transcript: str | Path | None = None,
) -> tuple[FormulationResult, list[CaseResult]]:
    """Query every case, resampling until the answer is acceptable.

    Results are reduced in case order, so the report does not depend on
    thread scheduling.  ``transcript`` appends one JSON line per case, also
    in case order: finished cases wait until every earlier one is written.
    """
    cases = make_cases(formulation, n_cases, seed, D, n_chains)
    lock = threading.Lock()
    fh = open(transcript, "a") if transcript else None
    pending: dict[int, CaseResult] = {}
    next_line = 0

    def one(i: int) -> CaseResult:
        nonlocal next_line
        r = run_case(client, cases[i], i, max_attempts)
        if fh is not None:
            with lock:
                pending[i] = r
                while next_line in pending:
                    fh.write(json.dumps(asdict(pending.pop(next_line))) + "\n")
                    next_line += 1
                fh.flush()
        return r

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(one, range(n_cases)))
        else:
            results = [one(i) for i in range(n_cases)]
    finally:
        if fh is not None:
            fh.close()
    skipped = [r for r in results if r.final == "Skipped"]
    if skipped:
        log.warning("%s: %d cases skipped after transport failures", formulation, len(skipped))
    return summarize(formulation, results, max_attempts), results
