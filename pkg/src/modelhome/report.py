"""Headless demo run with telemetry export.

Drives a test-mode Host for a fixed number of ticks, logs what the console
would show (plant metrics against their suitable ranges plus actuator
states), and renders the log to PNG figures next to the CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .host import Host

plt.rcParams.update({
    "figure.figsize": (9.0, 6.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
})

METRICS = (
    # (scenario attr, range prefix, axis label)
    ("accumulatedLight", "light", "accumulated light [lux h]"),
    ("temperature", "temperature", "temperature [C]"),
    ("soilMoisture", "moisture", "soil moisture [%]"),
    ("soilFertility", "fertility", "soil fertility [uS/cm]"),
)

CSV_COLUMNS = (
    "tick", "time_hours",
    "accumulatedLight", "temperature", "soilMoisture", "soilFertility",
    "lightMin", "lightMax", "temperatureMin", "temperatureMax",
    "moistureMin", "moistureMax", "fertilityMin", "fertilityMax",
    "lamp_on", "pump_on",
)


@dataclass
class TelemetryRow:
    tick: int
    time_hours: float
    plant: dict
    lamp_on: bool
    pump_on: bool

    def as_csv(self) -> dict:
        row = {"tick": self.tick, "time_hours": self.time_hours,
               "lamp_on": int(self.lamp_on), "pump_on": int(self.pump_on)}
        for name in CSV_COLUMNS[2:-2]:
            row[name] = self.plant.get(name, "")
        return row


def _first_of(snapshot_model: dict, class_name: str) -> dict | None:
    for eid in sorted(snapshot_model["elements"]):
        element = snapshot_model["elements"][eid]
        if element["class"] == class_name:
            return element
    return None


def collect_telemetry(host: Host, ticks: int) -> list[TelemetryRow]:
    rows: list[TelemetryRow] = []
    for _ in range(ticks):
        host.tick()
        snap = host.snapshot()
        scenario = snap["scenario"]
        plant = _first_of(scenario, "Plant")
        lamp = _first_of(scenario, "Lamp")
        pump = _first_of(scenario, "WaterPump")
        if plant is None:
            continue
        rows.append(TelemetryRow(
            tick=snap["tick"],
            time_hours=snap["time_hours"],
            plant=dict(plant["attrs"]),
            lamp_on=bool(lamp and lamp["attrs"].get("on")),
            pump_on=bool(pump and pump["attrs"].get("on")),
        ))
    return rows


def write_csv(rows: list[TelemetryRow], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_csv())


def plot_metrics(rows: list[TelemetryRow], path: Path) -> None:
    t = [r.time_hours for r in rows]
    fig, axes = plt.subplots(2, 2, sharex=True)
    for ax, (attr, prefix, label) in zip(axes.flat, METRICS):
        ax.plot(t, [r.plant.get(attr) for r in rows], lw=1.2, color="tab:green")
        lo = [r.plant.get(f"{prefix}Min") for r in rows]
        hi = [r.plant.get(f"{prefix}Max") for r in rows]
        ax.plot(t, lo, ls="--", lw=0.9, color="tab:red", label="suitable min")
        ax.plot(t, hi, ls="--", lw=0.9, color="tab:orange", label="suitable max")
        ax.set_ylabel(label)
        ax.legend(loc="best")
    for ax in axes[-1]:
        ax.set_xlabel("sim time [h]")
    fig.suptitle("plant metrics vs suitable ranges")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_actuators(rows: list[TelemetryRow], path: Path) -> None:
    t = [r.time_hours for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(9.0, 4.0))
    ax1.step(t, [int(r.lamp_on) for r in rows], where="post", color="tab:blue")
    ax1.set_ylabel("lamp on")
    ax1.set_yticks([0, 1])
    ax2.step(t, [int(r.pump_on) for r in rows], where="post", color="tab:cyan")
    ax2.set_ylabel("pump on")
    ax2.set_yticks([0, 1])
    ax2.set_xlabel("sim time [h]")
    fig.suptitle("actuator activity")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report(host: Host, ticks: int, out_dir: Path) -> list[Path]:
    """Run, then write telemetry.csv, metrics.png, actuators.png."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = collect_telemetry(host, ticks)
    csv_path = out_dir / "telemetry.csv"
    metrics_path = out_dir / "metrics.png"
    actuators_path = out_dir / "actuators.png"
    write_csv(rows, csv_path)
    plot_metrics(rows, metrics_path)
    plot_actuators(rows, actuators_path)
    return [csv_path, metrics_path, actuators_path]
