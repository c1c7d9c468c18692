"""MNIST comparison of softmax, black-box hierarchical and leveraged hierarchical models.

Needs the four standard IDX files (optionally gzipped) in ``--mnist-dir``.

    python3 scripts/mnist_comparison.py --mnist-dir ~/data/mnist
"""
import argparse
import sys
import time
from dataclasses import dataclass, field

from hierlogloss.cli import MNIST_CURVED_ORDER, MNIST_CURVED_TREE
from hierlogloss.compose import SoftmaxClassifier, leveraged_classifier
from hierlogloss.datasets import find_mnist_files, load_mnist_idx
from hierlogloss.learners import TrainConfig, train_hierarchical, train_leveraged, train_softmax
from hierlogloss.probability import empirical_report
from hierlogloss.tree import build_balanced_tree, parse_tree


@dataclass
class MnistConfig:
    mnist_dir: str
    crop: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--mnist-dir", required=True)
    parser.add_argument("--crop", type=int, default=4)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--lr", type=float, default=0.05)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args()
    cfg = MnistConfig(args.mnist_dir, args.crop, TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs))

    files = {split: find_mnist_files(cfg.mnist_dir, split) for split in ("train", "test")}
    if None in files.values():
        sys.exit(f"MNIST IDX files not found in {cfg.mnist_dir}")
    train = load_mnist_idx(*files["train"], crop=cfg.crop)
    test = load_mnist_idx(*files["test"], crop=cfg.crop)

    trees = {
        "permuted-balanced": build_balanced_tree(10, MNIST_CURVED_ORDER),
        "curved": parse_tree(MNIST_CURVED_TREE),
    }
    started = time.perf_counter()
    base = train_softmax(train, cfg.train)
    models = {"softmax": SoftmaxClassifier(base)}
    for name, tree in trees.items():
        models[f"hierarchical/{name}"] = train_hierarchical(train, tree, cfg.train)
        models[f"leveraged/{name}"] = leveraged_classifier(train_leveraged(train, tree, base, cfg.train))
    print(f"# trained in {time.perf_counter() - started:.1f}s")

    print("method\ttrain_error\ttest_error\ttrain_log_loss\ttest_log_loss")
    for name, model in models.items():
        tr = empirical_report(model.predict_proba(train.features), train.labels)
        te = empirical_report(model.predict_proba(test.features), test.labels)
        print(f"{name}\t{tr.zero_one_error:.4f}\t{te.zero_one_error:.4f}\t{tr.log_loss:.4f}\t{te.log_loss:.4f}")


if __name__ == "__main__":
    main()
