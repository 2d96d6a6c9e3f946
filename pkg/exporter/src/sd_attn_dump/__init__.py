"""sd-attn-dump: diffusion attention capture into attnseg containers."""

from .backends import DryRunBackend, ExportJob, ExportResult
from .container import ExportError, Manifest, Record, write_container
from .plan import PlanItem, read_plan
from .spans import class_token_spans, whitespace_token_count

__version__ = "0.1.0"
