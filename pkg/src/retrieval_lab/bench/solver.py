"""Reference solver working from prompt text alone.

It shares no code with the generators: every fact is re-parsed from the
prompt lines, so a generator bug shows up as a disagreement.
"""

from __future__ import annotations

import re

from .generators import PromptCase


class Unsolvable(ValueError):
    pass


def _lines(prompt: str) -> tuple[list[str], str]:
    rows = [r.strip() for r in prompt.strip().splitlines() if r.strip()]
    if not rows:
        raise Unsolvable("empty prompt")
    return [r.rstrip(".") for r in rows[:-1]], rows[-1]


def _follow(start: str, edges: dict[str, str], done) -> str:
    seen = set()
    cur = start
    while not done(cur):
        if cur in seen or cur not in edges:
            raise Unsolvable(f"chain from {start!r} breaks at {cur!r}")
        seen.add(cur)
        cur = edges[cur]
    return cur


def solve_equations(prompt: str) -> str:
    facts, q = _lines(prompt)
    edges = {}
    for f in facts:
        m = re.fullmatch(r"(\w+) = (\w+)", f)
        if not m:
            raise Unsolvable(f"cannot parse {f!r}")
        edges[m.group(1)] = m.group(2)
    m = re.match(r"What is the value of (\w+)\?", q)
    if not m:
        raise Unsolvable(f"cannot parse question {q!r}")
    return _follow(m.group(1), edges, str.isdigit)


def solve_lives_with(prompt: str) -> str:
    facts, q = _lines(prompt)
    edges, city = {}, {}
    for f in facts:
        if m := re.fullmatch(r"(\w+) lives with (\w+)", f):
            edges[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+) lives in (.+)", f):
            city[m.group(1)] = m.group(2)
        else:
            raise Unsolvable(f"cannot parse {f!r}")
    m = re.match(r"Where does (\w+) live\?", q)
    if not m:
        raise Unsolvable(f"cannot parse question {q!r}")
    return city[_follow(m.group(1), edges, lambda x: x in city)]


def _by_prefix(word: str, candidates, strip: int) -> str:
    """Candidate whose stem (minus ``strip`` trailing chars) starts ``word``."""
    hits = [c for c in candidates if word.lower().startswith(c.lower()[: len(c) - strip])]
    if len(hits) != 1:
        raise Unsolvable(f"{word!r} matches {hits}")
    return hits[0]


def solve_kingdoms(prompt: str) -> str:
    facts, q = _lines(prompt)
    lives, believe, eat, contains, causes = {}, {}, {}, {}, {}
    for f in facts:
        if m := re.fullmatch(r"(\w+) lives in (\w+)", f):
            lives[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+) believe in (\w+)", f):
            believe[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+) eat (\w+)", f):
            eat[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+) contains (\w+)", f):
            contains[m.group(1).lower()] = m.group(2)
        elif m := re.fullmatch(r"(\w+) causes (\w+)", f):
            causes[m.group(1)] = m.group(2)
        else:
            raise Unsolvable(f"cannot parse {f!r}")
    m = re.match(r"Who has (\w+)\?", q)
    if not m:
        raise Unsolvable(f"cannot parse question {q!r}")
    disease = m.group(1)
    mineral = next(k for k, v in causes.items() if v == disease)
    food = next(k for k, v in contains.items() if v == mineral)
    group = next(k for k, v in eat.items() if v.lower() == food)
    # "Harmonianists" follow "harmonianism": match on the stem before "ism"
    religion = _by_prefix(group, set(believe.values()), 3)
    people = next(k for k, v in believe.items() if v == religion)
    # "Novarians" live in "Novaria"
    kingdom = _by_prefix(people, set(lives.values()), 0)
    return next(k for k, v in lives.items() if v == kingdom)


def solve_functions(prompt: str) -> str:
    facts, q = _lines(prompt)
    table, alias, var = {}, {}, {}
    for f in facts:
        if m := re.fullmatch(r"(\w+)\((\d+)\) = (\d+)", f):
            table[(m.group(1), m.group(2))] = m.group(3)
        elif m := re.fullmatch(r"(\w+) = (\d+)", f):
            var[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+) = (\w+)", f):
            alias[m.group(1)] = m.group(2)
        else:
            raise Unsolvable(f"cannot parse {f!r}")
    m = re.match(r"What is the value of (\w+)\((\w+)\)\?", q)
    if not m:
        raise Unsolvable(f"cannot parse question {q!r}")
    names = {k for k, _ in table}
    fn = _follow(m.group(1), alias, lambda x: x in names)
    arg = m.group(2) if m.group(2).isdigit() else var[m.group(2)]
    return table[(fn, arg)]


def solve_relatives(prompt: str) -> str:
    facts, q = _lines(prompt)
    lives, kin, rule, job = {}, {}, {}, {}
    for f in facts:
        if m := re.fullmatch(r"(\w+) lives in (\w+)", f):
            lives[m.group(1)] = m.group(2)
        elif m := re.fullmatch(r"(\w+)'s (\w+) is (\w+)", f):
            kin[(m.group(1), m.group(2))] = m.group(3)
        elif m := re.fullmatch(r"(\w+) live with their (\w+)", f):
            rule[m.group(1).lower()] = m.group(2)
        elif m := re.fullmatch(r"(\w+) works as an? (\w+)", f):
            job[m.group(1)] = m.group(2)
        else:
            raise Unsolvable(f"cannot parse {f!r}")
    m = re.match(r"Where does (\w+) live\?", q)
    if not m:
        raise Unsolvable(f"cannot parse question {q!r}")
    who = m.group(1)
    plural_rel = rule[job[who] + "s"]
    rel = next(r for (s, r) in kin if s == who and r + "s" == plural_rel)
    return lives[kin[(who, rel)]]


SOLVERS = {
    "Equations": solve_equations,
    "LivesWith": solve_lives_with,
    "Kingdoms": solve_kingdoms,
    "Functions": solve_functions,
    "Relatives": solve_relatives,
}


def solve_text(formulation: str, prompt: str) -> str:
    try:
        return SOLVERS[formulation](prompt)
    except KeyError as exc:
        raise Unsolvable(f"missing fact: {exc}") from exc
    except StopIteration as exc:
        raise Unsolvable("missing fact") from exc


def solve_case(case: PromptCase) -> str:
    return solve_text(case.formulation, case.prompt)
