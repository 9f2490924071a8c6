"""Write-only exporter for the CCNN/CCEV binary containers."""

from .torch_export import ExportSpec, describe_model, source_predictions
from .writer import ExportError, GraphDescription, LayerRecord, write_eval, write_model
from .cli import export_eval, export_model, load_digits_eval

__version__ = "0.1.0"
