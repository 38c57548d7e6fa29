"""
Pre-training, episodic fine-tuning and checkpoints
"""
from src.training.checkpoint import load_checkpoint, restore_model, save_checkpoint
from src.training.trainer import finetune, pretrain

__all__ = ['pretrain', 'finetune', 'save_checkpoint', 'load_checkpoint', 'restore_model']
