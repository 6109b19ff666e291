"""Python API walkthrough on the synthetic planted-signal corpus.

    python demos/quickstart.py [output-dir]

Generates a corpus, derives manipulated posts, encodes with mock encoders,
trains an MLP_CLIP head and prints its robustness grid.
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from mmfnd import (
    Label,
    PlantedKeys,
    SyntheticCorpusSpec,
    TrainingConfig,
    build_test_grid,
    encode_batch,
    evaluate_manipulation_grid,
    generate_synthetic,
    preset_config,
    render_report,
    train,
)
from mmfnd.manipulation import event_replace_pass
from mmfnd.models import build_features, predict_split
from mmfnd.stages import make_encoders


def main(out: Path) -> None:
    corpus = generate_synthetic(SyntheticCorpusSpec(n_train=400, n_val=100, n_test=200, seed=1), out / "corpus")
    print(f"corpus: {len(corpus.train)} train / {len(corpus.validation)} val / {len(corpus.test)} test posts")

    # one manipulation by hand: rewrite the event a real post talks about
    post = next(p for p in corpus.test if p.label is Label.REAL)
    result = event_replace_pass([post], corpus.aliases, seed=0, pool=corpus.aliases.events())
    print(f"original : {post.text}")
    print(f"evtrep   : {result.posts[0].text}  -> {result.posts[0].label.name}")

    # mock CLIP-style encoders; planted keys tie matching image-text pairs together
    text_enc, image_enc = make_encoders("clip-vit-b32", "clip-vit-b32", mock=True, dim=64, signal_strength=0.9)
    planted = PlantedKeys.from_aliases(corpus.aliases)

    def features(posts):
        posts = list(posts)
        return build_features(posts, encode_batch(posts, text_enc, image_enc, corpus.store, planted))

    ckpt, history = train(preset_config("MLP_CLIP"), features(corpus.train), features(corpus.validation), TrainingConfig())
    print(f"trained MLP_CLIP for {len(history) - 1} epochs, kept epoch {ckpt.epoch} (val loss {ckpt.val_loss:.4f})")

    grid = build_test_grid(list(corpus.test), corpus.aliases, corpus.curated_map, corpus.annotations, seed=0)
    grid_features = {name: features(split) for name, split in grid.items()}
    table = evaluate_manipulation_grid({"mlp_clip": lambda name, split: predict_split(ckpt, grid_features[name])}, grid)
    print(render_report(table, "text"))


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
