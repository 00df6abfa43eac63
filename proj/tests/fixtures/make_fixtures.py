"""Regenerates the reflection fixtures from hand-counted sentence pools.

Every sentence carries its keyword count under substring and word-boundary
matching, counted by hand. A response is a concatenation of sentences, so its
expected counts are sums of those annotations.
"""
import json
import random
from pathlib import Path

HERE = Path(__file__).parent

# (text, substring hits, word-boundary hits)
REFLECTIVE = [
    ("Wait, let me double-check the sum.", 2, 2),
    ("WAIT. That cannot be right.", 1, 1),
    ("Let me just check the units again.", 1, 1),
    ("let me just verify with x = 3.", 1, 1),
    ("Let me verify: 12 * 4 = 48.", 1, 1),
    ("Let me check the boundary case.", 1, 1),
    ("To recap, the area is 12.", 1, 1),
    ("I should re-examine step two.", 1, 1),
    ("Hmm, wait wait, the sign flipped.", 2, 2),
    ("Double-checking: 7 + 5 = 12.", 1, 0),
    ("We re-examined the second case.", 1, 0),
    ("Awaiting the last term, we wait.", 2, 1),
    ("Let me recapitulate the argument.", 1, 0),
    ("Let me just check, then let me verify.", 2, 2),
    ("wait-time is 5 minutes.", 1, 1),
    ("The waiter brings 3 plates.", 1, 0),
]

PLAIN = [
    ("The answer is 42.", 0, 0),
    ("First compute the discriminant.", 0, 0),
    ("So x equals 7 and y equals 3.", 0, 0),
    ("Let me  check twice spaced is not a keyword.", 0, 0),
    ("Let me see the pattern.", 0, 0),
    ("Therefore the total is 18 apples.", 0, 0),
    ("Examine the graph carefully.", 0, 0),
    ("Double the result to get 14.", 0, 0),
    ("Let us just compute it directly.", 0, 0),
]

DATASETS = ["gsm8k", "math500", "minerva", "olympiad", "college", "aime24"]


def response(rng, reflective_sentences, plain_sentences):
    parts = rng.sample(REFLECTIVE, reflective_sentences) + rng.sample(PLAIN, plain_sentences)
    rng.shuffle(parts)
    text = " ".join(p[0] for p in parts)
    if rng.random() < 0.3:
        text = "\n  " + text + "  \n"
    return text, sum(p[1] for p in parts), sum(p[2] for p in parts)


def reflection_corpus(rng):
    rows = []
    for i in range(50):
        refl = 0 if i % 5 == 0 else rng.randint(1, 3)
        text, sub, strict = response(rng, refl, rng.randint(1, 3))
        rows.append({"id": f"r{i:02d}", "dataset": DATASETS[i % len(DATASETS)], "response": text,
                     "expected_keywords": sub, "expected_keywords_strict": strict})
    return rows


def labeled_corpus(rng):
    # Per dataset: (n, reflective responses), labeled by construction.
    plan = {"gsm8k": (40, 11), "math500": (30, 27), "minerva": (25, 18),
            "olympiad": (20, 19), "college": (35, 33), "aime24": (10, 10)}
    rows = []
    for ds, (n, k) in plan.items():
        flags = [True] * k + [False] * (n - k)
        rng.shuffle(flags)
        for j, flag in enumerate(flags):
            text, sub, _ = response(rng, rng.randint(1, 2) if flag else 0, rng.randint(1, 4))
            rows.append({"id": f"{ds}-{j}", "dataset": ds, "response": text, "token_count": rng.randint(50, 4000),
                         "correct": rng.random() < 0.6, "difficulty": rng.randint(1, 5),
                         "reflective_label": flag, "expected_keywords": sub})
    rng.shuffle(rows)
    return rows, {ds: {"n": n, "reflective": k} for ds, (n, k) in plan.items()}


def main():
    rng = random.Random(20250301)
    with open(HERE / "reflection_corpus.jsonl", "w") as f:
        for row in reflection_corpus(rng):
            f.write(json.dumps(row) + "\n")
    rows, counts = labeled_corpus(rng)
    with open(HERE / "reflection_labeled.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    with open(HERE / "reflection_labeled_counts.json", "w") as f:
        json.dump(counts, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
