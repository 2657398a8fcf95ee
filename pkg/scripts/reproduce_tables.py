"""Parameter and MAC tables for the encoder variants and the feedback modules at 256x256."""
import argparse

from fbformer.config import DecoderConfig, EncoderConfig, FeedbackConfig, ModelConfig
from fbformer.feedback import FeedbackFormer
from fbformer.profile import Convention, profile

REFERENCE = {"S12": (18.13, 5.74), "S24": (32.32, 8.87), "S36": (46.48, 11.93)}


def build(variant, mode):
    return FeedbackFormer(ModelConfig(encoder=EncoderConfig.from_variant(variant), decoder=DecoderConfig(),
                                      feedback=FeedbackConfig(mode=mode)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", type=int, default=256)
    ap.add_argument("--attention-products", action="store_true")
    args = ap.parse_args()
    conv = Convention(attention_products=args.attention_products)
    size = args.input

    print(f"encoder variants, single pass, 3x{size}x{size}")
    print(f"{'model':<8}{'params (M)':>12}{'ref':>8}{'MACs (G)':>11}{'ref':>8}")
    single = {}
    for variant, (p_ref, m_ref) in REFERENCE.items():
        r = profile(build(variant, "none"), size, conv)
        single[variant] = r
        print(f"{variant:<8}{r.total_params / 1e6:>12.2f}{p_ref:>8.2f}{r.total_macs / 1e9:>11.2f}{m_ref:>8.2f}")

    lite = profile(build("S12", "lite"), size, conv)
    fb_params, fb_macs = lite.subtotal("feedback")
    predicted = 2 * single["S12"].total_macs + fb_macs
    print(f"\nS12 + lite feedback, per pass: {lite.total_params / 1e6:.2f}M params, "
          f"{lite.total_macs / 1e9:.2f}G MACs (2 x single + module = {predicted / 1e9:.2f}G; ref 36.28M / 11.56G)")

    print(f"\nfeedback modules on S12, 3x{size}x{size}")
    print(f"{'module':<16}{'params (M)':>12}{'MACs (G)':>11}")
    macs = {}
    for mode in ("lite", "attn_st", "attn_self"):
        params, macs[mode] = profile(build("S12", mode), size, conv).subtotal("feedback")
        print(f"{mode:<16}{params / 1e6:>12.4f}{macs[mode] / 1e9:>11.4f}")
    print(f"lite / self MACs: {macs['lite'] / macs['attn_self']:.3f}")


if __name__ == "__main__":
    main()
