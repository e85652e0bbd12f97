"""
Pydantic schemas for benchmark reports.
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class BenchReport(BaseModel):
    """Timing and correctness record of one benchmarked kernel."""

    op: str = Field(..., description="Benchmarked operation")
    shape: str = Field(..., description="Problem shape, 'MxN' or 'MxKxN'")
    variant: Optional[str] = None
    threads: int = 1
    repetitions: int = Field(..., ge=1)
    median_ns: float
    throughput: float = Field(..., description="Elements per second")
    checksum: str
    oracle_checksum: str
    baseline_median_ns: Optional[float] = Field(
        None, description="Dense reference timing where one exists"
    )

    model_config = ConfigDict(extra="forbid")

    @property
    def matches_oracle(self) -> bool:
        return self.checksum == self.oracle_checksum
