"""EstimateReport: the result every estimator returns."""

from __future__ import annotations

import math
from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field

Z_975 = 1.959964


class Method(StrEnum):
    HT = "HT"
    IPW = "IPW"
    DR = "DR"
    NNI = "NNI"
    KNN = "KNN"
    GAM = "GAM"
    RC = "RC"


class EstimateReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method
    estimate: float
    variance: float = Field(ge=0)
    stderr: float = Field(ge=0)
    ci95: tuple[float, float]
    meta: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def build(cls, method: Method | str, estimate: float, variance: float, **meta: Any) -> EstimateReport:
        variance = max(float(variance), 0.0)
        se = math.sqrt(variance)
        half = Z_975 * se
        return cls(
            method=Method(method),
            estimate=float(estimate),
            variance=variance,
            stderr=se,
            ci95=(float(estimate) - half, float(estimate) + half),
            meta=meta,
        )

    def covers(self, value: float) -> bool:
        return self.ci95[0] <= value <= self.ci95[1]
