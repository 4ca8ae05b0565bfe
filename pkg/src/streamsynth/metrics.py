"""Named scalar metrics with provenance; lossless text round trip."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

ARTIFACT_VERSION = "streamsynth-0.1.0"


@dataclass
class MetricsReport:
    metrics: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    version: str = ARTIFACT_VERSION

    def to_text(self) -> str:
        lines = [
            f"provenance.version={self.version}",
            f"provenance.config_hash={self.config_hash}",
            f"provenance.seed={self.seed}",
        ]
        for name in sorted(self.metrics):
            lines.append(f"metric.{name}={self.metrics[name]!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key == "provenance.version":
                report.version = value
            elif key == "provenance.config_hash":
                report.config_hash = value
            elif key == "provenance.seed":
                report.seed = int(value)
            elif key.startswith("metric."):
                report.metrics[key[len("metric."):]] = float(value)
            else:
                raise ValueError(f"unknown report line {line!r}")
        return report

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))
