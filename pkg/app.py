"""
Point d'entrée en ligne de commande du pipeline SIF

Codes de sortie: 0 succès, 1 échec d'exécution, 2 erreur d'usage.
"""
import logging

import click

from commands import (
    ablate_cmd, eval_cmd, gen_data_cmd, gradcheck_cmd, report_cmd, sweep_cmd, tokenize_cmd, train_cmd
)
from exceptions import SIFError
from utils.rundir import LOG_FORMAT

# Configuration du logging
logging.basicConfig(
    level=logging.INFO,
    format=LOG_FORMAT,
    handlers=[
        logging.StreamHandler()
    ]
)

logger = logging.getLogger(__name__)


class SIFGroup(click.Group):
    """Groupe de commandes qui convertit les erreurs du pipeline en code de sortie 1"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except SIFError as e:
            logger.error(f"{type(e).__name__}: {str(e)}")
            raise click.ClickException(str(e)) from e


def create_cli() -> click.Group:
    """
    Construit le groupe de commandes

    Returns:
        cli: Groupe click avec toutes les étapes du pipeline enregistrées
    """

    @click.group(cls=SIFGroup)
    @click.option('--verbose', '-v', is_flag=True, help="Journalisation DEBUG")
    def cli(verbose):
        """Sample-level Interaction Features: génération, tokenisation, entraînement et évaluation"""
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)

    # Enregistrer les commandes
    for command in (gen_data_cmd, train_cmd, tokenize_cmd, eval_cmd, sweep_cmd, gradcheck_cmd,
                    report_cmd, ablate_cmd):
        cli.add_command(command)
    return cli


cli = create_cli()

if __name__ == '__main__':
    cli()
