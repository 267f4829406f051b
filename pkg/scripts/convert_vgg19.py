"""Convert torchvision VGG-19 ImageNet weights into the feature-extractor container.

Needs torchvision and network access (or a cached checkpoint):

    python scripts/convert_vgg19.py weights/vgg19.srt

The result is used with ``gan_stage.feature_extractor: weights/vgg19.srt``.
"""
import sys

import torch

from srdiag.losses import FeatureExtractor, save_feature_extractor


def main(path):
    from torchvision.models import VGG19_Weights, vgg19  # optional, not a package dependency

    src = [m for m in vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features if isinstance(m, torch.nn.Conv2d)]
    fx = FeatureExtractor()
    dst = list(fx.layers.values())
    assert len(src) == len(dst) == 16
    with torch.no_grad():
        for a, b in zip(src, dst):
            b.weight.copy_(a.weight)
            b.bias.copy_(a.bias)
    save_feature_extractor(path, fx)
    print(f"wrote {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "weights/vgg19.srt")
