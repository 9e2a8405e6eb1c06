"""Prompt generators, reference solver and benchmark harness for language models."""

from .generators import FORMULATIONS, PoolExhausted, PromptCase, gen_prompt
from .harness import (
    BenchReport,
    Grade,
    HTTPChatClient,
    MockClient,
    ProviderConfig,
    TransportError,
    grade,
    run_benchmark,
)
from .solver import Unsolvable, solve_case

__all__ = [
    "FORMULATIONS", "PoolExhausted", "PromptCase", "gen_prompt", "BenchReport", "Grade", "HTTPChatClient",
    "MockClient", "ProviderConfig", "TransportError", "grade", "run_benchmark", "Unsolvable", "solve_case",
]
