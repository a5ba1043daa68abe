"""
Fichier __init__.py pour le package commands
"""
from .data import gen_data_cmd
from .train import train_cmd, gradcheck_cmd
from .serve import tokenize_cmd, eval_cmd
from .studies import sweep_cmd, ablate_cmd, report_cmd

__all__ = ['gen_data_cmd', 'train_cmd', 'gradcheck_cmd', 'tokenize_cmd', 'eval_cmd',
           'sweep_cmd', 'ablate_cmd', 'report_cmd']
