"""segadapter: reference backend for the file-based mask-exchange protocol."""

from .cli import PROTOCOL_VERSION, serve_request
from .models import AdapterModel, ModelError
from .niftiio import NiftiError, NiftiVolume, read_nifti, write_labels_like

__version__ = "0.1.0"
