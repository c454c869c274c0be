"""Figuras SVG autocontidas: curvas de loss, acurácia por rodada e barras de heterogeneidade."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

# ── Estilo ────────────────────────────────────────────────────────────────────
STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.titlesize": 12,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linestyle": "--",
    "svg.fonttype": "none",
    "svg.hashsalt": "fedmim",
}

C = {
    "pretrain": "#1565C0",
    "finetune": "#E65100",
    "eval": "#2E7D32",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "fedmim"})
    plt.close(fig)
    return path


def plot_loss_curves(metrics: pd.DataFrame, path: str | Path) -> Path:
    """Loss média por rodada (linhas de cliente) para cada estágio presente."""
    clients = metrics[metrics["client_id"].notna()]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for stage, group in clients.groupby("stage", sort=False):
            curve = group.groupby("round")["loss"].mean()
            ax.plot(curve.index.astype(int), curve.to_numpy(), marker="o", ms=3, color=C.get(stage), label=stage)
        ax.set_xlabel("rodada")
        ax.set_ylabel("loss de treino (média dos clientes)")
        ax.set_title("Loss por rodada")
        if len(clients):
            ax.legend()
        return _save(fig, Path(path))


def plot_accuracy(metrics: pd.DataFrame, path: str | Path) -> Path:
    evals = metrics[metrics["client_id"].isna() & metrics["accuracy"].notna()]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for stage, group in evals.groupby("stage", sort=False):
            ax.plot(group["round"].astype(int), group["accuracy"], marker="s", ms=3, color=C["eval"], label=f"{stage} acc")
            ax.plot(group["round"].astype(int), group["f1_macro"], ls="--", color=C["eval"], alpha=0.6, label=f"{stage} F1 macro")
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("rodada")
        ax.set_ylabel("métrica no teste")
        ax.set_title("Acurácia por rodada")
        if len(evals):
            ax.legend()
        return _save(fig, Path(path))


def plot_heterogeneity(counts: pd.DataFrame, path: str | Path, skew: float | None = None) -> Path:
    """Barras empilhadas: contagem por classe em cada cliente."""
    table = counts.pivot(index="client_id", columns="class_id", values="count").fillna(0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(table) + 2), 3.5))
        bottom = np.zeros(len(table))
        cmap = plt.get_cmap("tab10")
        for j, cls in enumerate(table.columns):
            values = table[cls].to_numpy(dtype=float)
            ax.bar(table.index.astype(str), values, bottom=bottom, color=cmap(j % 10), label=f"classe {cls}")
            bottom += values
        ax.set_xlabel("cliente")
        ax.set_ylabel("instâncias")
        title = "Distribuição de classes por cliente"
        if skew is not None:
            title += f" (skew={skew:.3f})"
        ax.set_title(title)
        ax.legend(fontsize=8, ncol=2)
        return _save(fig, Path(path))


def plot_summary(table: pd.DataFrame, x: str, y: str, hue: str, path: str | Path, title: str) -> Path:
    """Curvas de um resumo de ablação (ex.: acurácia vs rodadas por braço)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, group in table.groupby(hue, sort=False):
            group = group.sort_values(x)
            ax.plot(group[x], group[y], marker="o", ms=4, label=str(name))
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        ax.set_title(title)
        ax.legend()
        return _save(fig, Path(path))
