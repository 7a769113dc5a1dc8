"""Smoke test for the Python bindings.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
copy `target/release/libvlmforge_py.so` to `vlmforge.so` on PYTHONPATH.
"""

import json
import os
import sys
import tempfile

import vlmforge


def main() -> int:
    assert [vlmforge.tokens_per_image(*g) for g in [(336, 14, 1), (224, 14, 1), (336, 14, 2)]] == [576, 256, 144]

    doc = {
        "doc_id": "schematic",
        "segments": [
            {"text": "txt1"},
            {"image_id": "im1", "sim_scores": {"0": 0.1, "2": 0.3, "3": 0.2, "5": 0.05}},
            {"text": "txt2"},
            {"text": "txt3"},
            {"image_id": "im2", "sim_scores": {"0": 0.05, "2": 0.1, "3": 0.2, "5": 0.35}},
            {"text": "txt4"},
        ],
    }
    pairs = vlmforge.to_pairs(json.dumps(doc))
    assert [(p[0], p[1]) for p in pairs] == [("im1", "txt2"), ("im2", "txt4")], pairs

    with tempfile.TemporaryDirectory() as tmp:
        vlmforge.write_fixture(tmp, "topic", 60, 0)
        docs = os.path.join(tmp, "interleaved.jsonl")
        model, log = vlmforge.train_preset(
            "d", docs, os.path.join(tmp, "pairs.jsonl"), seed=0, init_steps=5, pretrain_steps=20, sft_steps=5
        )
        rows = log.strip().splitlines()
        print(f"trained {len(rows) - 1} steps, final loss {float(rows[-1].split(',')[2]):.3f}")
        profile = model.alignment_profile(docs)
        print("alignment profile:", " ".join(f"{v:.3f}" for v in profile))
        ckpt = os.path.join(tmp, "model.ckpt")
        model.save(ckpt)
        assert vlmforge.Model.load(ckpt).num_params() == model.num_params()

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
