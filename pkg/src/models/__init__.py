"""
Backbone, text knowledge, permeation, disentanglement and the episode learner
"""
from src.models.backbone import Backbone
from src.models.bkp import KnowledgePermeation
from src.models.meta_head import BiKop, build_model
from src.models.sad import FilterNet
from src.models.text_knowledge import FrozenTextEncoder, TextKnowledge

__all__ = ['Backbone', 'KnowledgePermeation', 'BiKop', 'build_model', 'FilterNet', 'FrozenTextEncoder', 'TextKnowledge']
