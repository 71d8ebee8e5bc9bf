import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .dynamics import EnsembleStats
from .errors import ConfigurationError
from .scaling import ExponentFit, LaplaceEstimate
from .utils import ensure_directory, resolve_path, setup_logging, settings_section
from .variational import FunctionalValues

logger = setup_logging(__name__)

JSON_TYPES = {
    "number": (int, float),
    "integer": (int,),
    "string": (str,),
    "array": (list, tuple),
    "object": (dict,),
}


# Pydantic models for structured output
class LaplaceEntry(BaseModel):
    lam: float = Field(..., alias="lambda", description="Laplace variable")
    value: float = Field(..., description="Estimated E-hat(lambda)")
    tail_fraction: float = Field(..., description="Share of the value carried by the extrapolated tail")

    model_config = ConfigDict(populate_by_name=True)


class ScalingReport(BaseModel):
    gamma_hat: Optional[float] = Field(None, description="Fitted log exponent of E(t)/t")
    ci: Optional[List[float]] = Field(None, description="Two-sided confidence interval of gamma_hat")
    amplitude: Optional[float] = Field(None, description="Fitted amplitude of E(t) / (t (log t)^gamma)")
    laplace: List[LaplaceEntry] = Field(default_factory=list, description="Laplace transform estimates")
    aw_slope: Optional[float] = Field(None, description="Residual slope of the scaling consistency check")
    input: Optional[str] = Field(None, description="Series the report was computed from")


class AwCheckReport(BaseModel):
    nu: float = Field(..., description="Power exponent")
    gamma: float = Field(..., description="Log exponent")
    slope: float = Field(..., description="Regression slope of log(L/R) on log log t")


class RunManifest(BaseModel):
    command: str = Field(..., description="Subcommand that produced the outputs")
    version: str = Field(__version__, description="Code version")
    seed: int = Field(0, description="Global seed")
    config: Dict[str, Any] = Field(default_factory=dict, description="Fully resolved configuration echo")
    outputs: List[str] = Field(default_factory=list, description="Files written by the run")


class ReportBuilder:
    def __init__(self, schema_path: Optional[str] = None):
        output_settings = settings_section("output")
        self.schema_path = schema_path or output_settings.get("json_schema_path", "docs/output_schema.json")
        self.float_format = output_settings.get("float_format", "%.17g")
        self.output_schema = self._load_output_schema()

    def _load_output_schema(self) -> Dict[str, Any]:
        """Load the output schema definition"""
        try:
            with open(resolve_path(self.schema_path), 'r', encoding='utf-8') as file:
                return json.load(file)
        except Exception as e:
            logger.error(f"Error loading output schema: {e}")
            return {}

    # --- tables ------------------------------------------------------------

    def simulate_frame(self, ensemble: EnsembleStats) -> pd.DataFrame:
        return pd.DataFrame({
            "t": ensemble.times,
            "E_t": ensemble.E,
            "stderr": ensemble.stderr,
            "E1_t": ensemble.E1,
            "E2_t": ensemble.E2,
        }, columns=self.columns("simulate_csv"))

    def bounds_frame(self, rows: Sequence[FunctionalValues]) -> pd.DataFrame:
        records = []
        for row in rows:
            records.append({
                "lambda": row.lam,
                "lower_bound": row.lower_bound,
                "upper_bound": row.upper_bound,
                "J1": row.J1,
                "J2": row.J2,
                "J3": row.J3,
                "J31_bound": row.J31_bound,
                "J32_prime": row.J32_prime,
                "err_estimate": row.error_estimate,
            })
        return pd.DataFrame.from_records(records, columns=self.columns("bounds_csv"))

    def columns(self, table: str) -> Optional[List[str]]:
        return self.output_schema.get(table, {}).get("columns")

    def write_csv(self, frame: pd.DataFrame, output_path: str) -> str:
        ensure_directory(str(Path(output_path).parent))
        frame.to_csv(output_path, index=False, float_format=self.float_format)
        logger.info(f"CSV written to: {output_path} ({len(frame)} rows)")
        return output_path

    # --- JSON --------------------------------------------------------------

    def scaling_report(self, fit: Optional[ExponentFit], laplace: Sequence[LaplaceEstimate],
                       aw_slope: Optional[float], input_path: Optional[str] = None) -> ScalingReport:
        return ScalingReport(
            gamma_hat=None if fit is None else fit.gamma,
            ci=None if fit is None else list(fit.gamma_ci),
            amplitude=None if fit is None else fit.amplitude,
            laplace=[LaplaceEntry(lam=e.lam, value=e.value, tail_fraction=e.tail_fraction) for e in laplace],
            aw_slope=aw_slope,
            input=input_path,
        )

    def validate(self, kind: str, payload: Dict[str, Any]) -> bool:
        """Required keys present and non-null values of the declared JSON type"""
        schema = self.output_schema.get(kind)
        if not schema:
            logger.warning(f"No schema entry for {kind}; skipping validation")
            return True
        for field in schema.get("required", []):
            if field not in payload:
                logger.error(f"Missing required field: {field}")
                return False
        for field, type_name in schema.get("properties", {}).items():
            value = payload.get(field)
            if value is None:
                continue
            expected = JSON_TYPES.get(type_name, (object,))
            if isinstance(value, bool) or not isinstance(value, expected):
                logger.error(f"Field {field} is not a JSON {type_name}")
                return False
        return True

    def save_json(self, kind: str, report: BaseModel, output_path: str) -> str:
        """Validate against the output schema and save the report to a JSON file"""
        payload = _json_ready(report.model_dump(by_alias=True))
        if not self.validate(kind, payload):
            raise ConfigurationError(f"{kind} report does not match {self.schema_path}")
        ensure_directory(str(Path(output_path).parent))
        with open(output_path, 'w', encoding='utf-8') as file:
            json.dump(payload, file, indent=2, ensure_ascii=False)
        logger.info(f"Report saved to: {output_path}")
        return output_path

    def manifest_path(self, output_path: str) -> str:
        return f"{output_path}.manifest.json"

    def write_manifest(self, manifest: RunManifest, output_path: str) -> str:
        return self.save_json("manifest", manifest, self.manifest_path(output_path))


def _json_ready(value: Any) -> Any:
    """numpy scalars and non-finite floats to plain JSON values"""
    if isinstance(value, dict):
        return {key: _json_ready(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(item) for item in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value
