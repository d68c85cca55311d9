#!/usr/bin/env python3
"""Convert a Hugging Face ViTForImageClassification checkpoint to a vitprobe
weight manifest (JSON) plus raw little-endian f32 blob.

    python tools/convert_hf_vit.py <model dir or hub id> out/model.json [--labels a,b,...]

Linear weights are transposed from [out, in] to [in, out] and the patch
convolution kernel is permuted from [D, C, P, P] to [D, P, P, C].
"""

import argparse
import hashlib
import json
import struct
from pathlib import Path

import numpy as np


def checksum(data: bytes) -> str:
    return hashlib.sha256(data).digest()[:8].hex()


def header_checksum(format_version, config, labels):
    eps_bits = struct.unpack(">I", struct.pack(">f", config["layer_norm_eps"]))[0]
    label_json = "null" if labels is None else json.dumps(labels, separators=(",", ":"), ensure_ascii=False)
    fields = [format_version] + [config[k] for k in (
        "image_h", "image_w", "channels", "patch", "embed_dim",
        "n_blocks", "n_heads", "mlp_hidden", "n_classes")]
    canonical = "|".join(str(f) for f in fields) + f"|{eps_bits:08x}|{label_json}"
    return checksum(canonical.encode("utf-8"))


LAYER_NORMS = {
    "ln1.gamma": "layernorm_before.weight",
    "ln1.beta": "layernorm_before.bias",
    "ln2.gamma": "layernorm_after.weight",
    "ln2.beta": "layernorm_after.bias",
}

# (vectors, matrices) per block, ours -> theirs.
NAMES_V4 = (
    {
        **LAYER_NORMS,
        "attn.bq": "attention.attention.query.bias",
        "attn.bk": "attention.attention.key.bias",
        "attn.bv": "attention.attention.value.bias",
        "attn.bo": "attention.output.dense.bias",
        "mlp_in.bias": "intermediate.dense.bias",
        "mlp_out.bias": "output.dense.bias",
    },
    {
        "attn.wq": "attention.attention.query.weight",
        "attn.wk": "attention.attention.key.weight",
        "attn.wv": "attention.attention.value.weight",
        "attn.wo": "attention.output.dense.weight",
        "mlp_in.weight": "intermediate.dense.weight",
        "mlp_out.weight": "output.dense.weight",
    },
)

NAMES_V5 = (
    {
        **LAYER_NORMS,
        "attn.bq": "attention.q_proj.bias",
        "attn.bk": "attention.k_proj.bias",
        "attn.bv": "attention.v_proj.bias",
        "attn.bo": "attention.o_proj.bias",
        "mlp_in.bias": "mlp.fc1.bias",
        "mlp_out.bias": "mlp.fc2.bias",
    },
    {
        "attn.wq": "attention.q_proj.weight",
        "attn.wk": "attention.k_proj.weight",
        "attn.wv": "attention.v_proj.weight",
        "attn.wo": "attention.o_proj.weight",
        "mlp_in.weight": "mlp.fc1.weight",
        "mlp_out.weight": "mlp.fc2.weight",
    },
)


def convert(state, hf_config):
    """Maps checkpoint tensors to vitprobe names. Returns (config, {name: array})."""
    t = lambda k: state[k].detach().cpu().numpy().astype(np.float32)
    config = {
        "image_h": hf_config.image_size,
        "image_w": hf_config.image_size,
        "channels": hf_config.num_channels,
        "patch": hf_config.patch_size,
        "embed_dim": hf_config.hidden_size,
        "n_blocks": hf_config.num_hidden_layers,
        "n_heads": hf_config.num_attention_heads,
        "mlp_hidden": hf_config.intermediate_size,
        "n_classes": hf_config.num_labels,
        "layer_norm_eps": float(np.float32(hf_config.layer_norm_eps)),
    }
    out = {
        "embed.patch_kernel": t("vit.embeddings.patch_embeddings.projection.weight").transpose(0, 2, 3, 1),
        "embed.patch_bias": t("vit.embeddings.patch_embeddings.projection.bias"),
        "embed.cls_token": t("vit.embeddings.cls_token").reshape(1, -1),
        "embed.pos_embed": t("vit.embeddings.position_embeddings")[0],
        "final_ln.gamma": t("vit.layernorm.weight"),
        "final_ln.beta": t("vit.layernorm.bias"),
        "head.weight": t("classifier.weight").T,
        "head.bias": t("classifier.bias"),
    }
    # transformers 5 renamed the per-layer modules; 4.x state dicts (and the
    # safetensors files on the hub) use the older names.
    if "vit.layers.0.attention.q_proj.weight" in state:
        layer = "vit.layers.{}."
        vectors, matrices = NAMES_V5
    else:
        layer = "vit.encoder.layer.{}."
        vectors, matrices = NAMES_V4
    for i in range(config["n_blocks"]):
        src = layer.format(i)
        dst = f"block.{i}."
        for ours, theirs in vectors.items():
            out[dst + ours] = t(src + theirs)
        for ours, theirs in matrices.items():
            out[dst + ours] = t(src + theirs).T
    return config, out


def write(config, tensors, labels, manifest_path: Path):
    blob_path = manifest_path.with_suffix(".bin")
    entries, blob = [], bytearray()
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensors[name].shape),
            "byte_offset": len(blob),
            "byte_length": len(data),
            "checksum": checksum(data),
        })
        blob += data
    manifest = {"format_version": 1, "config": config}
    if labels is not None:
        manifest["labels"] = labels
    manifest["header_checksum"] = header_checksum(1, config, labels)
    manifest["entries"] = entries
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(bytes(blob))
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("model", help="local directory or hub id of a ViTForImageClassification checkpoint")
    ap.add_argument("manifest", type=Path)
    ap.add_argument("--labels", help="comma-separated class names (default: the checkpoint's id2label)")
    args = ap.parse_args()

    from transformers import ViTForImageClassification

    model = ViTForImageClassification.from_pretrained(args.model)
    config, tensors = convert(model.state_dict(), model.config)
    if args.labels:
        labels = args.labels.split(",")
    else:
        id2label = model.config.id2label
        labels = [id2label[i] for i in range(config["n_classes"])]
    if len(labels) != config["n_classes"]:
        raise SystemExit(f"{len(labels)} labels for {config['n_classes']} classes")
    write(config, tensors, labels, args.manifest)
    print(f"wrote {args.manifest} and {args.manifest.with_suffix('.bin')}")


if __name__ == "__main__":
    main()
