"""Text prompts for the five retrieval formulations.

Each prompt interleaves ``n_chains`` independent chains; exactly one chain
answers the question and every chain ends in a distinct acceptable answer.
Name pools live in ``data/pools.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

FORMULATIONS = ("Equations", "LivesWith", "Kingdoms", "Functions", "Relatives")
FIXED_D = {"Kingdoms": 5, "Functions": None, "Relatives": None}

ASK_NUMBER = "Say directly only the numeric value, without any other words."


class PoolExhausted(ValueError):
    pass


@dataclass(frozen=True)
class PromptCase:
    formulation: str
    D: int | None
    prompt: str
    correct: str
    acceptable: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.correct not in self.acceptable:
            raise ValueError("correct answer missing from the acceptable set")
        if len(self.acceptable) < 2:
            raise ValueError("need at least two acceptable answers")

    def to_dict(self) -> dict:
        return {
            "formulation": self.formulation,
            "D": self.D,
            "prompt": self.prompt,
            "correct": self.correct,
            "acceptable": list(self.acceptable),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PromptCase:
        return cls(d["formulation"], d.get("D"), d["prompt"], d["correct"], tuple(d["acceptable"]))


@lru_cache(maxsize=1)
def pools() -> dict:
    text = resources.files("retrieval_lab.bench").joinpath("data/pools.json").read_text()
    return json.loads(text)


def _take(name: str, start: int, n: int) -> list:
    pool = pools()[name]
    if start + n > len(pool):
        raise PoolExhausted(f"pool {name!r} has {len(pool)} entries, need {start + n}")
    return list(pool[start : start + n])


def _shuffled(items: list, rng: np.random.Generator) -> list:
    return [items[i] for i in rng.permutation(len(items))]


def _sorted_acceptable(values) -> tuple[str, ...]:
    return tuple(sorted(values, key=lambda v: (len(v), v) if v.isdigit() else (0, v)))


# -- retrieval formulations ------------------------------------------------------


def gen_equations(D: int, n_chains: int, rng: np.random.Generator) -> PromptCase:
    """``a = 1`` tier first, then ``x = y`` tiers, then a question."""
    if D < 1:
        raise ValueError("D must be >= 1")
    if n_chains > 10:
        raise PoolExhausted("Equations values are single digits; at most 10 chains")
    letters = _take("letters", 0, D * n_chains)
    values = rng.permutation(n_chains)
    # names[t][c]: variable of chain c at tier t
    names = [[letters[t * n_chains + j] for j in rng.permutation(n_chains)] for t in range(D)]
    lines = _shuffled([f"{names[0][c]} = {values[c]}" for c in range(n_chains)], rng)
    for t in range(1, D):
        lines += _shuffled([f"{names[t][c]} = {names[t - 1][c]}" for c in range(n_chains)], rng)
    target = int(rng.integers(n_chains))
    q = f"What is the value of {names[-1][target]}? {ASK_NUMBER}"
    return PromptCase(
        "Equations",
        D,
        "\n".join(lines + [q]),
        str(values[target]),
        _sorted_acceptable(str(v) for v in range(n_chains)),
    )


def gen_lives_with(D: int, n_chains: int, rng: np.random.Generator) -> PromptCase:
    if D < 1:
        raise ValueError("D must be >= 1")
    people = _take("people", 0, D * n_chains)
    cities = _take("cities", 0, n_chains)
    names = [[people[t * n_chains + j] for j in rng.permutation(n_chains)] for t in range(D)]
    home = _shuffled(cities, rng)
    lines = _shuffled([f"{names[0][c]} lives in {home[c]}" for c in range(n_chains)], rng)
    for t in range(1, D):
        lines += _shuffled([f"{names[t][c]} lives with {names[t - 1][c]}" for c in range(n_chains)], rng)
    target = int(rng.integers(n_chains))
    q = f"Where does {names[-1][target]} live? Say directly only the name of the city, without any other words."
    return PromptCase("LivesWith", D, "\n".join(lines + [q]), home[target], tuple(sorted(cities)))


def demonym(kingdom: str) -> str:
    return kingdom + "ns"


def adherents(religion: str) -> str:
    return religion[:-3].capitalize() + "ists"


def gen_kingdoms(n_chains: int, rng: np.random.Generator) -> PromptCase:
    """Five fixed tiers: person, kingdom, religion, food, mineral, disease."""
    tiers = ["kingdom_people", "kingdoms", "religions", "foods", "minerals", "diseases"]
    p, k, r, f, m, z = (_shuffled(_take(name, 0, n_chains), rng) for name in tiers)
    lines = _shuffled([f"{p[c]} lives in {k[c]}." for c in range(n_chains)], rng)
    lines += _shuffled([f"{demonym(k[c])} believe in {r[c]}." for c in range(n_chains)], rng)
    lines += _shuffled([f"{adherents(r[c])} eat {f[c]}." for c in range(n_chains)], rng)
    lines += _shuffled([f"{f[c].capitalize()} contains {m[c]}." for c in range(n_chains)], rng)
    lines += _shuffled([f"{m[c]} causes {z[c]}." for c in range(n_chains)], rng)
    target = int(rng.integers(n_chains))
    q = f"Who has {z[target]}? Say directly the name without other words."
    return PromptCase("Kingdoms", 5, "\n".join(lines + [q]), p[target], tuple(sorted(p)))


# -- conditional formulations ----------------------------------------------------


def gen_functions(n_chains: int, rng: np.random.Generator) -> PromptCase:
    """Value tables for ``n`` functions, aliases, argument variables, one query."""
    n = n_chains
    if n > 10:
        raise PoolExhausted("Functions values are single digits; at most 10 functions")
    letters = _take("letters", 0, 3 * n)
    funcs, aliases, args = letters[:n], letters[n : 2 * n], letters[2 * n :]
    tables = [rng.permutation(n) for _ in range(n)]
    alias_of = rng.permutation(n)  # alias i names function alias_of[i]
    arg_val = rng.permutation(n)
    lines = [f"{funcs[i]}({x}) = {tables[i][x]}" for i in range(n) for x in range(n)]
    lines += [f"{aliases[i]} = {funcs[alias_of[i]]}" for i in range(n)]
    lines += [f"{args[i]} = {arg_val[i]}" for i in range(n)]
    a, b = int(rng.integers(n)), int(rng.integers(n))
    correct = tables[alias_of[a]][arg_val[b]]
    q = f"What is the value of {aliases[a]}({args[b]})? {ASK_NUMBER}"
    return PromptCase("Functions", None, "\n".join(lines + [q]), str(correct),
                      _sorted_acceptable(str(v) for v in range(n)))


def gen_relatives(n_chains: int, rng: np.random.Generator) -> PromptCase:
    """Each subject has one relative per relation; a profession picks the relation."""
    P = pools()
    rels = P["relations"]
    profs = P["professions"]
    n = n_chains
    subjects = _take("relatives_subjects", 0, n)
    per_sex = {s: sum(1 for r in rels if r[2] == s) * n for s in ("female", "male")}
    people = {s: _shuffled(_take(s, 0, k), rng) for s, k in per_sex.items()}
    countries = _take("countries", 0, len(rels) * n)
    relative = {}
    used = {"female": 0, "male": 0}
    for s in subjects:
        for rel, _, sex in rels:
            who = people[sex][used[sex]]
            used[sex] += 1
            relative[(s, rel)] = who
    everyone = [relative[(s, r[0])] for s in subjects for r in rels]
    lives = dict(zip(everyone, _shuffled(countries, rng)))
    prof_rel = rng.permutation(len(rels))  # profession i lives with relation prof_rel[i]
    if n <= len(profs):
        job = rng.permutation(len(profs))[:n]
    else:
        job = rng.integers(len(profs), size=n)

    lines = _shuffled([f"{w} lives in {lives[w]}." for w in everyone], rng)
    lines += [f"{s}'s {rel} is {relative[(s, rel)]}." for s in subjects for rel, _, _ in rels]
    lines += [f"{profs[i][1]} live with their {rels[prof_rel[i]][1]}." for i in range(len(profs))]
    lines += [f"{s} works as {profs[job[i]][2]} {profs[job[i]][0]}." for i, s in enumerate(subjects)]
    t = int(rng.integers(n))
    target = subjects[t]
    correct = lives[relative[(target, rels[prof_rel[job[t]]][0])]]
    q = f"Where does {target} live? Say directly only the name, without any other words."
    return PromptCase("Relatives", None, "\n".join(lines + [q]), correct, tuple(sorted(countries)))


def gen_prompt(formulation: str, D: int | None, n_chains: int, rng: np.random.Generator) -> PromptCase:
    if n_chains < 2:
        raise ValueError("need at least two chains so that wrong answers exist")
    if formulation in FIXED_D:
        fixed = FIXED_D[formulation]
        if D is not None and D != fixed:
            raise ValueError(f"{formulation} has a fixed shape (D={fixed}), got D={D}")
    if formulation == "Equations":
        return gen_equations(5 if D is None else D, n_chains, rng)
    if formulation == "LivesWith":
        return gen_lives_with(5 if D is None else D, n_chains, rng)
    if formulation == "Kingdoms":
        return gen_kingdoms(n_chains, rng)
    if formulation == "Functions":
        return gen_functions(n_chains, rng)
    if formulation == "Relatives":
        return gen_relatives(n_chains, rng)
    raise ValueError(f"unknown formulation {formulation!r}; expected one of {FORMULATIONS}")
