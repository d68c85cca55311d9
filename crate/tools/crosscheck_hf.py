#!/usr/bin/env python3
"""Builds a small randomly initialized ViTForImageClassification, converts it
with convert_hf_vit.py and compares `vitprobe classify` against transformers.

    python tools/crosscheck_hf.py [--bin target/debug/vitprobe]

The input image is generated at the model's native size, so resizing is the
identity and both sides see the same pixels.
"""

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import ViTConfig, ViTForImageClassification

sys.path.insert(0, str(Path(__file__).parent))
import convert_hf_vit  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bin", default="target/debug/vitprobe")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tolerance", type=float, default=1e-5)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    cfg = ViTConfig(image_size=32, patch_size=8, hidden_size=48, num_hidden_layers=3,
                    num_attention_heads=4, intermediate_size=96, num_labels=5)
    model = ViTForImageClassification(cfg).eval()
    with torch.no_grad():
        # Default init leaves biases and LayerNorm at trivial values.
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.1)

    img = np.random.default_rng(args.seed).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    x = torch.tensor((img / 255.0 - 0.5) / 0.5, dtype=torch.float32).permute(2, 0, 1)[None]
    with torch.no_grad():
        expected = torch.softmax(model(pixel_values=x).logits[0].double(), -1).numpy()

    with tempfile.TemporaryDirectory() as tmp:
        manifest = Path(tmp) / "model.json"
        image = Path(tmp) / "input.png"
        config, tensors = convert_hf_vit.convert(model.state_dict(), model.config)
        convert_hf_vit.write(config, tensors, [f"class{i}" for i in range(5)], manifest)
        Image.fromarray(img).save(image)
        out = subprocess.run([args.bin, "classify", "--weights", str(manifest), "--image", str(image)],
                             capture_output=True, text=True, check=True)
    got = np.array(json.loads(out.stdout)["probs"])
    diff = np.abs(expected - got).max()
    print(f"max abs probability difference {diff:.3e}")
    sys.exit(0 if diff <= args.tolerance else 1)


if __name__ == "__main__":
    main()
