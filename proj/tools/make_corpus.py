#!/usr/bin/env python3
"""Writes the bundled sample corpus: short English-like documents separated
by a single 0x00 byte. Output is a pure function of --seed and --size."""

import argparse
import random

SUBJECTS = [
    "the old miller", "a young sailor", "the village doctor", "my grandmother", "the quiet student",
    "a travelling merchant", "the baker's daughter", "our neighbour", "the river pilot", "a tired soldier",
    "the schoolteacher", "the lighthouse keeper", "a curious child", "the night watchman", "the gardener",
]
VERBS = [
    "walked to", "looked at", "spoke about", "wrote a letter to", "dreamed of", "returned to",
    "painted", "carried bread to", "waited near", "sang softly by", "forgot about", "remembered",
]
OBJECTS = [
    "the harbour", "the stone bridge", "the market square", "an empty house", "the northern hills",
    "the small chapel", "the frozen lake", "the orchard", "a narrow street", "the railway station",
    "the lamp on the table", "the edge of the forest", "the last train", "the winter garden",
]
TIMES = [
    "in the morning", "before dawn", "after the storm", "late that evening", "on a Sunday",
    "when the bells rang", "during the long winter", "at noon", "as the rain began", "that autumn",
]
CLAUSES = [
    "and nobody said a word", "because the wind was cold", "while the dogs slept",
    "though it was already late", "and the sky turned grey", "as if nothing had happened",
    "and the lamps were lit one by one", "so the others followed",
]
TITLES = ["A Letter", "The Crossing", "Notes from the Valley", "An Evening", "The Harbour Road", "Small Hours"]


def sentence(rng: random.Random) -> str:
    parts = [rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)]
    if rng.random() < 0.6:
        parts.append(rng.choice(TIMES))
    if rng.random() < 0.4:
        parts.append(rng.choice(CLAUSES))
    text = " ".join(parts)
    return text[0].upper() + text[1:] + rng.choice([".", ".", ".", "!", "?"])


def document(rng: random.Random, index: int) -> str:
    lines = [f"{rng.choice(TITLES)} ({index})", ""]
    for _ in range(rng.randint(2, 6)):
        lines.append(" ".join(sentence(rng) for _ in range(rng.randint(2, 7))))
        lines.append("")
    return "\n".join(lines)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("output")
    parser.add_argument("--size", type=int, default=1 << 20, help="approximate size in bytes")
    parser.add_argument("--seed", type=int, default=2022)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    chunks, total, index = [], 0, 0
    while total < args.size:
        doc = document(rng, index).encode("ascii") + b"\x00"
        chunks.append(doc)
        total += len(doc)
        index += 1
    with open(args.output, "wb") as f:
        f.write(b"".join(chunks)[: args.size])


if __name__ == "__main__":
    main()
