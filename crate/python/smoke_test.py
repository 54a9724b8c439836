"""Smoke test for the grouptie_py extension module."""

import os
import random
import tempfile

import grouptie_py as gt


def corpus(n, seed):
    rng = random.Random(seed)
    docs, labels = [], []
    for _ in range(n):
        y = rng.randrange(2)
        cue = ("good", "great", "fine") if y else ("bad", "awful", "poor")
        toks = [f"w{rng.randrange(30)}" for _ in range(6)] + [rng.choice(cue)]
        rng.shuffle(toks)
        docs.append(toks)
        labels.append(y)
    return docs, labels


def main():
    docs, labels = corpus(120, 1)
    vocab = gt.Vocabulary(docs)
    assert len(vocab) == len(set(t for d in docs for t in d))
    assert vocab.pad_id == vocab.unk_id + 1 == len(vocab) + 1

    ids = vocab.encode(["good", "bad"])
    groups = gt.GroupTable(len(vocab), [
        [vocab.encode([w])[0] for w in ("good", "great", "fine")],
        [vocab.encode([w])[0] for w in ("bad", "awful", "poor")],
    ])
    assert groups.num_groups == 2
    assert groups.covered_words() == 6
    assert groups.groups_of(ids[0]) == [0]

    rng = random.Random(2)
    dim = 8
    pretrained = [[rng.uniform(-0.25, 0.25) for _ in range(dim)] for _ in range(len(vocab))]
    model = gt.Model(vocab, pretrained, groups, filter_heights=[1, 2], filters_per_height=4, seed=3)

    losses = gt.fit(model, docs, labels, epochs=5, batch_size=20)
    assert len(losses) == 5 and losses[-1] < losses[0], losses
    encoded = [vocab.encode(d) for d in docs]
    probs = model.predict_proba(encoded)
    assert all(abs(sum(p) - 1.0) < 1e-9 for p in probs)
    acc = gt.accuracy(model.predict(encoded), labels)
    auc = gt.auc([p[1] for p in probs], [y == 1 for y in labels])
    assert 0.0 <= acc <= 1.0 and 0.0 <= auc <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        loaded = gt.Model.load(path)
        assert loaded.step == model.step
        assert loaded.predict_proba(encoded) == probs
        assert loaded.channel2_rows() == model.channel2_rows()

    folds = gt.kfold_split(labels, 5, seed=0)
    assert sorted(i for f in folds for i in f) == list(range(len(labels)))
    assert 0 <= gt.hash_dim(0, 0, 16) < 16
    assert gt.sign(0, 0, signing_enabled=False) == 1

    try:
        gt.Model(vocab, pretrained, None, channel2_mode="group_init_share")
    except ValueError:
        pass
    else:
        raise AssertionError("group mode without groups accepted")

    print(f"ok: loss {losses[0]:.4f} -> {losses[-1]:.4f}, accuracy {acc:.3f}, auc {auc:.3f}")


if __name__ == "__main__":
    main()
