"""Standalone metric computation for eval_fixture.jsonl.

Writes eval_fixture_expected.json next to the fixture. Uses only the
standard library and shares no code with the crate.
"""
import json
import re
from collections import Counter
from pathlib import Path

HERE = Path(__file__).resolve().parent.parent
REFUSAL = "cannot answer this question based on given information".split()


def pieces(text):
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower())


def words(text):
    return [p for p in pieces(text) if re.search(r"[a-z0-9]", p)]


def f1(ref, cand):
    r, c = words(ref), words(cand)
    if not r or not c:
        return 1.0 if not r and not c else 0.0
    common = sum((Counter(r) & Counter(c)).values())
    if common == 0:
        return 0.0
    p, q = common / len(c), common / len(r)
    return 2 * p * q / (p + q)


def refuses(text):
    return pieces(text)[: len(REFUSAL)] == REFUSAL


def correct(answer, reference):
    a, r = " ".join(words(answer)), " ".join(words(reference))
    if r in ("yes", "no"):
        return a == r
    return a == r or f1(reference, answer) >= 0.8


def ece(items):
    bins = [[] for _ in range(10)]
    for c, ok in items:
        bins[min(int(c * 10), 9)].append((c, ok))
    n = len(items)
    total = 0.0
    for b in bins:
        if b:
            conf = sum(c for c, _ in b) / len(b)
            acc = sum(1 for _, ok in b if ok) / len(b)
            total += len(b) / n * abs(acc - conf)
    return total


def main():
    rows = [json.loads(l) for l in (HERE / "eval_fixture.jsonl").read_text().splitlines() if l.strip()]
    m = [r for r in rows if r["matching"]]
    nm = [r for r in rows if not r["matching"]]
    rec = [r["source_retrieved"] for r in m if r["source_retrieved"] is not None]
    cal = [(r["confidence"], correct(r["answer"], r["reference"])) for r in m if r["confidence"] is not None]
    out = {
        "n_matching": len(m),
        "n_nonmatching": len(nm),
        "token_f1": sum(f1(r["reference"], r["answer"]) for r in m) / len(m),
        "retrieval_recall_at_k": sum(rec) / len(rec),
        "refusal_rate_on_nonmatching": sum(refuses(r["answer"]) for r in nm) / len(nm),
        "false_refusal_rate_on_matching": sum(refuses(r["answer"]) for r in m) / len(m),
        "ece": ece(cal),
    }
    (HERE / "eval_fixture_expected.json").write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
