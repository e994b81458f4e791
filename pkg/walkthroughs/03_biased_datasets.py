"""
Synthetic datasets with a shortcut
==================================

In the classification task each question type has a dominant answer. The
context features identify the answer on their own, but a model can also
score well in distribution by reading only the question type.
"""

import numpy as np

from looseqa.datagen import BiasedClassConfig, SpanConfig, gen_span_like, gen_vqa_like, load, serialize

cfg = BiasedClassConfig(n_train=5000, n_test=2000, n_val=500)
data = gen_vqa_like(cfg, seed=1337)
for name, split in data.items():
    print(f"{name:9s} n={len(split)}")

# majority answer per question type, read off the training split
train = data["train"]
majority = np.array([np.bincount(train.label[train.qtype == t], minlength=cfg.n_answers).argmax() for t in range(cfg.n_types)])
for name in ("train", "id_test", "ood_test"):
    split = data[name]
    print(f"type-only guess on {name:9s}: {np.mean(majority[split.qtype] == split.label):.3f}")
# expected: about rho + (1 - rho) / |A| in distribution, below chance once the prior is inverted

# nearest prototype from the context alone (class means estimated on train)
means = np.stack([train.cfeat[train.label == a].mean(axis=0) for a in range(cfg.n_answers)])
for name in ("id_test", "ood_test"):
    split = data[name]
    pred = np.argmin(((split.cfeat[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    print(f"context-only guess on {name:9s}: {np.mean(pred == split.label):.3f}")

# spans: all training answers sit in sentence 1; dev is split by sentence
spans = gen_span_like(SpanConfig(n_train=500, n_dev=500), seed=7)
print("train answers per sentence 1..5:", np.bincount(spans["train_k"].answer_sentence, minlength=6)[1:])
print("dev sizes", {k: len(v) for k, v in spans["dev_by_sentence"].items()})

# datasets are line-delimited JSON with a header record
lines = list(serialize(data["val"]))
print(lines[0][:120], "...")
assert load(lines) == data["val"]
