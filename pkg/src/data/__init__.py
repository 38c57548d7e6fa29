"""
Synthetic compositional dataset, episode sampling and persistence
"""
from src.data.storage import load_dataset, save_dataset
from src.data.synth_data import ClassSpec, Dataset, Episode, generate_dataset, sample_episode

__all__ = ['ClassSpec', 'Dataset', 'Episode', 'generate_dataset', 'sample_episode', 'load_dataset', 'save_dataset']
