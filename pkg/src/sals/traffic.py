"""Element-traffic counting for the decode path.

Counts are in element-equivalents of 32-bit storage: a quantized value of
``nd`` channels at ``b`` bits is charged ``nd * b / 32``. In ``"idealized"``
mode every selected token is charged ``r`` for its key and ``r`` for its
value regardless of precision, which is the idealized ``s*r* + 2*k*r``
model; ``"itemized"`` charges what the cache actually stores.

Every charge is a dyadic rational well below 2**53, so float sums are exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

MODES = ("itemized", "idealized")


class TrafficCounter:
    def __init__(self, mode: str = "itemized"):
        if mode not in MODES:
            raise ValueError(f"unknown traffic mode {mode!r}")
        self.mode = mode
        self.score = 0.0
        self.reconstruct = 0.0
        self.value = 0.0

    def add_scores(self, s: int, r_star: int) -> None:
        self.score += s * r_star

    def add_keys(self, compressed: int, buffered: int, r: int, nd: int) -> None:
        if self.mode == "idealized":
            self.reconstruct += (compressed + buffered) * r
        else:
            self.reconstruct += compressed * r + buffered * nd

    def add_values(self, compressed: int, buffered: int, r: int, nd: int, bits: int) -> None:
        if self.mode == "idealized":
            self.value += (compressed + buffered) * r
        else:
            self.value += compressed * nd * bits / 32 + buffered * nd

    @property
    def total(self) -> float:
        return self.score + self.reconstruct + self.value


def predicted_elements(mode: str, s: int, r_star: int, r: int, nd: int, bits: int,
                       n_compressed: int, n_recent: int) -> float:
    """Closed-form element count of one sparse decode step."""
    if mode == "idealized":
        return s * r_star + 2 * (n_compressed + n_recent) * r
    return s * r_star + n_compressed * (r + nd * bits / 32) + n_recent * 2 * nd


@dataclass
class TrafficReport:
    elements_score_phase: float
    elements_reconstruct_phase: float
    elements_value_phase: float
    baseline_elements: float
    predicted_ratio: float
    measured_ratio: float
    mode: str = "itemized"
    seq_len: int = 0
    selected: int = 0
    selected_compressed: int = 0
    selected_recent: int = 0

    @property
    def total_elements(self) -> float:
        return self.elements_score_phase + self.elements_reconstruct_phase + self.elements_value_phase

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_elements"] = self.total_elements
        return d

    @classmethod
    def from_counter(cls, counter: TrafficCounter, *, seq_len: int, nd: int, predicted: float,
                     selected_compressed: int, selected_recent: int) -> TrafficReport:
        baseline = 2.0 * seq_len * nd
        return cls(
            elements_score_phase=counter.score,
            elements_reconstruct_phase=counter.reconstruct,
            elements_value_phase=counter.value,
            baseline_elements=baseline,
            predicted_ratio=predicted / baseline,
            measured_ratio=counter.total / baseline,
            mode=counter.mode,
            seq_len=seq_len,
            selected=selected_compressed + selected_recent,
            selected_compressed=selected_compressed,
            selected_recent=selected_recent,
        )
