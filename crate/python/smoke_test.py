"""Builds the extension module and exercises it from Python.

    python3 python/smoke_test.py [--no-build]
"""

import argparse
import importlib.util
import pathlib
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

TINY = """
synthetic_train = 24
synthetic_val = 4
synthetic_test = 4
min_count = 1
parser_embed = 8
parser_hidden = 8
parser_layers = 1
parser_chunk = 2
parser_epochs = 1
width = 16
decoder_layers = 1
decoder_heads = 2
ffn = 16
tree_layers = 1
gat_layers = 1
epochs = 1
batch = 8
"""


def load(build):
    if build:
        subprocess.run(
            ["cargo", "build", "--release", "-p", "sgn-python", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
    lib = ROOT / "target" / "release" / "libsgnpy.so"
    if not lib.exists():
        sys.exit(f"missing {lib}; run without --no-build")
    spec = importlib.util.spec_from_file_location("sgnpy", lib)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--no-build", action="store_true")
    sgnpy = load(not ap.parse_args().no_build)

    tree = sgnpy.SentenceTree([0, 0, 1, 1])
    print("tree", tree, "bits", tree.bits())
    assert sgnpy.SentenceTree.from_bits(tree.bits()) == tree
    split = sgnpy.greedy_split([0.2, 0.7, 0.1])
    print("split", split, "f1 vs tree", round(sgnpy.unlabeled_f1(split.canonical(), split), 3))

    words = sgnpy.split_words("Whisk the eggs, then fold in the sugar.")
    print("words", words)
    assert sgnpy.bleu([words], [words]) == 1.0
    assert sgnpy.rouge_l([words], [words]) == 1.0

    with tempfile.TemporaryDirectory() as root:
        tree_run = sgnpy.Experiment(TINY, root)
        base_run = sgnpy.Experiment(TINY, root, baseline=True)
        with_tree, without = tree_run.run(), base_run.run()
        print("tree   ", with_tree)
        print("no tree", without)
        print("deltas", dict(without.compare(with_tree)))

    print("smoke test ok")


if __name__ == "__main__":
    main()
