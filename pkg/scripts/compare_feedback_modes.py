"""Short synthetic run of every feedback mode with identical data, seed and schedule; prints a per-class IoU table."""
import argparse

from fbformer.config import DecoderConfig, EncoderConfig, FeedbackConfig, ModelConfig, TrainConfig
from fbformer.feedback import FeedbackFormer
from fbformer.losses import format_iou_table
from fbformer.train import evaluate, fit

from synthetic_training import synthetic_tiles

MODES = ("none", "lite", "attn_self", "attn_st")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tiles = synthetic_tiles(args.seed)
    train, test = tiles[:15], tiles[15:]
    rows = {}
    for mode in MODES:
        model = FeedbackFormer(ModelConfig(
            encoder=EncoderConfig(variant="custom", dims=[16, 32, 48, 64], depths=[1, 1, 2, 1], heads=[1, 2, 3, 4]),
            decoder=DecoderConfig(channels=32, num_classes=2),
            feedback=FeedbackConfig(mode=mode, hidden=16, attn_downsample=2)), seed=args.seed)
        fit(model, train, train, TrainConfig(epochs=args.epochs, batch_size=4, lr=1e-3,
                                             eval_every=args.epochs, seed=args.seed))
        report = evaluate(model, test, ["membrane", "background"])
        rows[mode] = (report.iou, report.miou)
        print(f"{mode} done", flush=True)
    print(format_iou_table(["membrane", "background"], rows))


if __name__ == "__main__":
    main()
