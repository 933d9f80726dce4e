"""Builds the filter golden fixture and its expected verdicts.

Reads filter_golden/chunks.json (token lists per chunk), writes
candidates.jsonl, answers.json and report.jsonl. The four acceptance rules
and the lexical ranking are written out here from scratch; nothing is
shared with the crate. Standard library only.
"""
import json
import math
import random
import re
from collections import Counter
from pathlib import Path

DIR = Path(__file__).resolve().parent.parent / "filter_golden"
K = 4
SPAN_MIN, OVERLAP_MIN, CONF_MIN, UNC_MAX = 0.5, 0.6, -1.5, 0.5
K1, B = 1.2, 0.75


# ---- rules -------------------------------------------------------------

def words(text):
    return [p for p in re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower()) if re.search(r"[a-z0-9]", p)]


def f1(ref, cand):
    r, c = words(ref), words(cand)
    if not r or not c:
        return 1.0 if not r and not c else 0.0
    common = sum((Counter(r) & Counter(c)).values())
    if common == 0:
        return 0.0
    p, q = common / len(c), common / len(r)
    return 2 * p * q / (p + q)


class Lexical:
    def __init__(self, chunks):
        self.chunks = chunks
        self.n = len(chunks)
        self.avg = sum(len(c["tokens"]) for c in chunks) / self.n
        self.df = Counter()
        for c in chunks:
            self.df.update(set(c["tokens"]))

    def score(self, query, doc):
        total = 0.0
        for q in query:
            tf = doc.count(q)
            if tf == 0:
                continue
            df = self.df[q]
            idf = math.log((self.n - df + 0.5) / (df + 0.5) + 1.0)
            total += idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * len(doc) / self.avg))
        return total

    def top(self, question, k):
        q = question.split()
        ranked = sorted(self.chunks, key=lambda c: (-self.score(q, c["tokens"]), c["id"]))
        return [c["id"] for c in ranked[:k]]


def verdict(t, lex, script):
    scores = {}
    top = set(lex.top(t["question"], K))
    passage = {r["id"] for r in t["passage_segment_ids"]}
    s = len(passage & top) / len(passage)
    scores["span_coverage"] = s
    if s < SPAN_MIN:
        return False, "span_coverage", scores
    a = script["answer"]
    s = -1.0 if a is None else f1(t["answer"], a)
    scores["roundtrip_f1"] = s
    if s < OVERLAP_MIN:
        return False, "roundtrip_f1", scores
    s = t["gen_logprob"]
    scores["norm_logprob"] = s
    if s < CONF_MIN:
        return False, "norm_logprob", scores
    xs = script["samples"]
    if xs is None:
        scores["uncertainty"] = -1.0
        return False, "uncertainty", scores
    pair = [f1(xs[i], xs[j]) for i in range(len(xs)) for j in range(i + 1, len(xs))]
    total = 0.0
    for v in pair:
        total += v
    s = 1.0 - total / len(pair)
    scores["uncertainty"] = s
    if not s <= UNC_MAX:
        return False, "uncertainty", scores
    return True, None, scores


# ---- fixture -----------------------------------------------------------

def content(tokens):
    return [w for w in tokens if re.fullmatch(r"[a-z0-9]+", w)]


def build(chunks, rng):
    by_seg = {}
    for c in chunks:
        by_seg.setdefault(c["segment"], []).append(c)
    multi = [v for v in by_seg.values() if len(v) >= 2]
    cands, answers = [], {}
    seen = set()
    plans = ["span_off", "span_pair", "round_wrong", "round_none", "conf", "unc_spread", "unc_none", "accept", "accept_pair", "edge"]
    i = 0
    while len(cands) < 50:
        plan = plans[i % len(plans)]
        i += 1
        c = rng.choice(chunks)
        words_c = content(c["tokens"])
        if len(words_c) < 8:
            continue
        passage = [c]
        if plan in ("span_pair", "accept_pair"):
            passage = rng.choice(multi)[:2] if plan == "accept_pair" else rng.choice(multi)[:3]
            c = passage[0]
            words_c = content(c["tokens"])
            if len(words_c) < 8:
                continue
        qsrc = words_c
        if plan == "span_off":
            other = rng.choice([o for o in chunks if o["segment"] != c["segment"]])
            qsrc = content(other["tokens"]) or words_c
        qwords = rng.sample(qsrc, min(6, len(qsrc)))
        question = " ".join(qwords) + " ?"
        if question in seen:
            continue
        seen.add(question)
        start = rng.randrange(0, len(words_c) - 3)
        answer = " ".join(words_c[start:start + 3 + rng.randrange(0, 3)])
        logprob = round(rng.uniform(-1.4, -0.1), 3)
        reply = answer
        samples = [answer, answer, answer]
        if plan == "round_wrong":
            reply = " ".join(rng.sample(words_c, 4))
        elif plan == "round_none":
            reply = None
        elif plan == "conf":
            logprob = round(rng.uniform(-4.0, -1.51), 3)
        elif plan == "unc_spread":
            samples = [" ".join(rng.sample(words_c, 3)) for _ in range(3)]
        elif plan == "unc_none":
            samples = None
        elif plan == "edge":
            # five answer words, three shared with the regenerated answer
            a5 = words_c[start:start + 5]
            if len(a5) < 5 or len(set(a5)) < 5:
                continue
            answer = " ".join(a5)
            reply = " ".join(a5[:3] + ["zz1", "zz2"])
            logprob = -1.5
            samples = [answer, " ".join(a5[:2]), answer]
        cands.append({
            "id": f"g{len(cands):02d}",
            "passage_segment_ids": [{"tier": "I3", "id": p["id"]} for p in passage],
            "question": question,
            "answer": answer,
            "format": "EX",
            "matching": True,
            "rationale": None,
            "provenance": "bootstrap",
            "gen_logprob": logprob,
            "filter_scores": {},
        })
        answers[question] = {"answer": reply, "samples": samples}
    return cands, answers


def main():
    chunks = json.loads((DIR / "chunks.json").read_text())
    cands, answers = build(chunks, random.Random(20240611))
    lex = Lexical(chunks)
    with open(DIR / "candidates.jsonl", "w") as f:
        for t in cands:
            f.write(json.dumps(t) + "\n")
    (DIR / "answers.json").write_text(json.dumps(answers, indent=1, sort_keys=True) + "\n")
    tally = Counter()
    with open(DIR / "report.jsonl", "w") as f:
        for t in cands:
            ok, stage, scores = verdict(t, lex, answers[t["question"]])
            tally[stage or "accepted"] += 1
            f.write(json.dumps({"id": t["id"], "accepted": ok, "reject_stage": stage, "stage_scores": scores}) + "\n")
    print(dict(tally))


if __name__ == "__main__":
    main()
