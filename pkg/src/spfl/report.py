"""Metric plots and attention-map reports for finished runs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from .attacks import TriggerSpec  # noqa: E402
from .errors import ConfigError, FormatError  # noqa: E402
from .nn import Network, ParamVector, check_manifest, gradcam  # noqa: E402
from .runner import METRICS_FILE, load_manifest, read_metrics  # noqa: E402


def emit_plots(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None,
               labels: Sequence[str] | None = None) -> list[Path]:
    """Write ma.png and asr.png with one series per run; all metrics are read before anything is drawn."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise FormatError("no runs to plot")
    series = [read_metrics(d / METRICS_FILE) for d in run_dirs]
    if labels is None:
        labels = []
        for d in run_dirs:
            try:
                labels.append(load_manifest(d).get("defense", d.name))
            except (OSError, ValueError):
                labels.append(d.name)
    out = Path(out_dir) if out_dir else run_dirs[0]
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, title in (("ma", "Main task accuracy"), ("asr", "Attack success rate")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for rows, label in zip(series, labels):
            ax.plot([r["round"] for r in rows], [r[key] for r in rows], marker="o", ms=3, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel(key.upper())
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{key}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def _maps(net: Network, params: ParamVector, inputs: np.ndarray, classes: np.ndarray) -> torch.Tensor:
    flat = torch.tensor(params.values, requires_grad=True)
    x = torch.from_numpy(inputs).to(flat.dtype)
    layer = net.spec.attention_layers[0]
    logits, acts = net.apply(flat, x, keep=[layer])
    score = logits.gather(1, torch.as_tensor(classes)[:, None]).sum()
    return gradcam(acts[layer], score).detach()


def model_attention(net: Network, models: Sequence[ParamVector], inputs: np.ndarray) -> np.ndarray:
    """Maps for the predicted class of ``models`` (one model, or a teacher/student pair averaged)."""
    logits = np.mean([net.logits(m, inputs) for m in models], axis=0)
    classes = logits.argmax(axis=1)
    return torch.stack([_maps(net, m, inputs, classes) for m in models]).mean(0).numpy()


def attention_distance(net: Network, models: Sequence[ParamVector], clean: np.ndarray,
                       trigger: TriggerSpec, batch_size: int = 250) -> float:
    """Mean L2 distance between attention maps of clean inputs and their triggered copies."""
    for m in models:
        check_manifest(m, net)
    triggered = trigger.stamp(clean)
    dists = []
    for start in range(0, len(clean), batch_size):
        a = model_attention(net, models, clean[start:start + batch_size])
        b = model_attention(net, models, triggered[start:start + batch_size])
        dists.append(np.sqrt(((a - b) ** 2).sum(axis=(1, 2))))
    return float(np.concatenate(dists).mean())


def upsample(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.asarray(maps, dtype=np.float32))[:, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[:, 0].numpy()


def save_heatmap(image: np.ndarray, cam: np.ndarray, path: Path) -> None:
    """Input image with the upsampled map overlaid at 50% alpha."""
    img = image.transpose(1, 2, 0)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    cam = cam - cam.min()
    cam = cam / (cam.max() + 1e-8)
    heat = plt.get_cmap("jet")(cam)[..., :3]
    blend = np.clip(0.5 * img + 0.5 * heat, 0, 1)
    plt.imsave(path, blend)


def attention_report(net: Network, models: Sequence[ParamVector], inputs: np.ndarray, trigger: TriggerSpec,
                     out_dir: str | Path, n_images: int = 8) -> tuple[float, list[Path]]:
    """Heatmaps for the first ``n_images`` clean/triggered pairs plus the mean attention distance."""
    if not models:
        raise ConfigError("no checkpoints given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    distance = attention_distance(net, models, inputs, trigger)
    sample = inputs[:n_images]
    triggered = trigger.stamp(sample)
    size = tuple(inputs.shape[-2:])
    paths = []
    for tag, batch in (("clean", sample), ("triggered", triggered)):
        cams = upsample(model_attention(net, models, batch), size)
        for i, (img, cam) in enumerate(zip(batch, cams)):
            p = out / f"{tag}_{i:03d}.png"
            save_heatmap(img, cam, p)
            paths.append(p)
    (out / "distance.txt").write_text(f"{distance:.6f}\n")
    return distance, paths
