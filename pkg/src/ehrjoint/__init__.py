"""Graph/text joint representation learning for EHR admissions at desk scale."""
from .data import PairDataset, PairExample, Vocabularies, collate
from .graph import GraphSchema, convert_tables, dxpx_schema, rx_schema
from .model import GraphTextModel, ModelConfig
from .pretrain import Pretrainer

__version__ = "0.1.0"
__all__ = ["GraphSchema", "GraphTextModel", "ModelConfig", "PairDataset", "PairExample", "Pretrainer",
           "Vocabularies", "collate", "convert_tables", "dxpx_schema", "rx_schema"]
