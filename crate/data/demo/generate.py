#!/usr/bin/env python3
"""Regenerates the demo corpus, mock completion script, queries and qrels.

The output is deterministic; rerunning overwrites the files in this directory
with identical bytes.
"""
import json
import os
import random

HERE = os.path.dirname(os.path.abspath(__file__))
rng = random.Random(20221010)

TOPICS = {
    "astronomy": "comet orbit telescope nebula eclipse planet crater meteor galaxy lunar solar asteroid".split(),
    "cooking": "recipe oven flour butter simmer garlic pastry broth spice dough roast sauce".split(),
    "geology": "basalt magma fault quartz erosion sediment granite glacier volcano mineral strata fossil".split(),
    "medicine": "vaccine dosage symptom clinic fever antibody insulin therapy surgeon allergy tablet virus".split(),
    "shipping": "harbor cargo vessel anchor freight tanker dock hull crane container pilot tide".split(),
    "music": "violin chord tempo melody opera rhythm piano choir sonata guitar lyric drum".split(),
    "finance": "bond equity dividend ledger inflation interest loan budget tariff audit pension credit".split(),
    "botany": "orchid pollen seed root fern blossom leaf moss cactus bark petal sprout".split(),
}
FILLER = "the a of in on with from during after before near across under over among".split()
VERBS = "shaped influenced supported required produced reduced attracted revealed protected described".split()
SYLL = "ka lo mi ren tor vel dan sa qui bro fen zul ar ith om pel nax ury".split()


def entity_name(used):
    while True:
        name = "".join(rng.choice(SYLL) for _ in range(rng.randint(2, 3))).capitalize()
        if name not in used:
            used.add(name)
            return name


def sentence(entity, words):
    w = rng.sample(words, 3)
    return (
        f"{rng.choice(['The', 'A', 'One'])} {w[0]} {rng.choice(FILLER)} {entity} "
        f"{rng.choice(VERBS)} the {w[1]} {rng.choice(FILLER)} {w[2]}."
    )


def main():
    used = set()
    topics = sorted(TOPICS)
    docs = []
    for i in range(200):
        topic = topics[i % len(topics)]
        entity = entity_name(used)
        # ten short documents fall under the 300-character sampling floor
        n_sent = 2 if i % 20 == 7 else rng.randint(6, 16)
        body = " ".join(sentence(entity, TOPICS[topic]) for _ in range(n_sent))
        doc_id = f"D{i:04d}"
        title = f"{entity} ({topic})" if i % 3 else None
        docs.append({"_id": doc_id, "title": title, "text": body, "topic": topic, "entity": entity})

    with open(os.path.join(HERE, "corpus.jsonl"), "w") as f:
        for d in docs:
            rec = {"_id": d["_id"]}
            if d["title"] is not None:
                rec["title"] = d["title"]
            rec["text"] = d["text"]
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")

    # Mock completions: most documents get an on-topic question with confident
    # token log-probabilities; every fourth gets an off-topic question with
    # low log-probabilities, which filtering should discard.
    script = []
    generated = []
    for i, d in enumerate(docs):
        words = TOPICS[d["topic"]]
        if i % 4 == 3:
            other = TOPICS[topics[(topics.index(d["topic"]) + 3) % len(topics)]]
            q = f"what is the {rng.choice(other)} of {rng.choice(other)}?"
            base = -2.6
        else:
            present = [w for w in words if w in d["text"]]
            q = f"what {rng.choice(['is', 'was'])} the {rng.choice(present)} of {d['entity'].lower()}?"
            base = -0.35
        generated.append(q)
        pieces = q.split(" ")
        tokens = [" " + pieces[0]] + [" " + p for p in pieces[1:]]
        tokens[-1] = tokens[-1][:-1]
        tokens.append("?")
        logprobs = [round(min(0.0, base + rng.uniform(-0.25, 0.25)), 4) for _ in tokens]
        tokens += ["\n", "Example"]
        logprobs += [-0.01, -0.02]
        script.append({"doc_id": d["_id"], "tokens": tokens, "logprobs": logprobs, "finish_reason": "stop"})

    with open(os.path.join(HERE, "mock_script.jsonl"), "w") as f:
        for rec in script:
            f.write(json.dumps(rec) + "\n")

    # Evaluation queries target one document each (grade 2) and mark one
    # same-topic document as partially relevant (grade 1).
    targets = rng.sample([d for d in docs if len(d["text"]) >= 300], 40)
    with open(os.path.join(HERE, "queries.tsv"), "w") as qf, open(os.path.join(HERE, "qrels.txt"), "w") as rf:
        for n, d in enumerate(targets):
            qid = f"q{n + 1:03d}"
            word = rng.choice([w for w in TOPICS[d["topic"]] if w in d["text"]])
            qf.write(f"{qid}\t{d['entity'].lower()} {word}\n")
            rf.write(f"{qid} 0 {d['_id']} 2\n")
            sibling = rng.choice([o for o in docs if o["topic"] == d["topic"] and o is not d])
            rf.write(f"{qid} 0 {sibling['_id']} 1\n")

    # Reference questions for the memorization probe: a handful of the
    # generated questions with perturbed case/spacing, plus unrelated ones.
    refs = [q.upper().rstrip("?") for q in rng.sample(generated, 6)]
    refs += [f"how many {rng.choice(FILLER)} {rng.choice(TOPICS[t])} are there" for t in topics for _ in range(5)]
    with open(os.path.join(HERE, "reference_queries.txt"), "w") as f:
        for r in refs:
            f.write(r + "\n")


if __name__ == "__main__":
    main()
