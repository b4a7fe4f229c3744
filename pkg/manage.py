"""Master script to run knowledge-distillation experiments.

Usage:
 manage.py [options] (pretrain-teacher|soft-targets|train|screen|label|finetune)
 manage.py [options] distill
 manage.py [options] baseline-kd
 manage.py [options] scratch [--multiplier=<m>]
 manage.py [options] md [--model=<name>]
 manage.py [options] analyze
 manage.py [options] timing
 manage.py --config-keys
 manage.py (-h | --help)

Arguments:
 pretrain-teacher  Train the teacher on MD frames labeled by the softened,
               dispersion-free oracle.
 soft-targets  Sample teacher-driven MD and label it with the teacher.
 train         Split the soft targets and train the student on them.
 screen        Select hard-target candidates among the soft training frames.
 label         Relabel the selected frames with the ground-truth oracle.
 finetune      Fine-tune the student on the hard targets.
 distill       Run every stage above end-to-end, then evaluate, run
               production MD and analyze.
 baseline-kd   Fine-tune the teacher on random hard targets and distill a
               fresh student from its soft targets.
 scratch       Train the student architecture on hard targets only.
 md            Production NVT MD with a stored checkpoint.
 analyze       Regenerate histogram, summary and MSD tables from the stored
               datasets and trajectories.
 timing        Seconds per MD step of teacher and student per system size.

Options:
 -c <path> --config=<path>  Run configuration (TOML); defaults to the bundled
                            data/master_config.toml.
 -o <dir> --out=<dir>       Run directory; defaults to $KDNNP_OUT, then
                            ./runs/default.
 --seed=<seed>              Override run.seed.
 --threads=<n>              joblib workers; 1 is bitwise reproducible
                            [default: 1].
 --multiplier=<m>           Hard-target budget multiple [default: 1].
 --model=<name>             Checkpoint in the run directory
                            [default: student_finetuned].
 --config-keys              Print every configuration key and exit.
 -v --verbose               Debug logging and progress bars.
"""

from docopt import docopt
import logging
import os
import sys

import kdnnp.common.config as C
import kdnnp.common.utils as utils
import kdnnp.driver
import kdnnp.logger
from kdnnp.md.dynamics import NonFiniteState

CONFIG_PATH = os.path.join(os.path.dirname(__file__),
                           "data", "master_config.toml")
DEFAULT_OUT = os.path.join("runs", "default")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_UNSTABLE = 3

logger = logging.getLogger(__name__)

COMMANDS = {
    'pretrain-teacher': lambda d, a: d.pretrain_teacher(),
    'soft-targets': lambda d, a: d.generate_soft_targets(),
    'train': lambda d, a: d.train_student(),
    'screen': lambda d, a: d.screen(),
    'label': lambda d, a: d.label_hard_targets(),
    'finetune': lambda d, a: d.finetune_student(),
    'distill': lambda d, a: d.distill(),
    'baseline-kd': lambda d, a: d.baseline_finetuned_teacher_kd(),
    'scratch': lambda d, a: d.scratch_baseline(
        multiplier=int(a['--multiplier'])),
    'md': lambda d, a: (d.production_md(name=a['--model']), d.analyze()),
    'analyze': lambda d, a: d.analyze(),
    'timing': lambda d, a: d.timing_report(),
}


def config_path(arguments):
    return arguments['--config'] or CONFIG_PATH


def output_dir(arguments):
    return (arguments['--out'] or os.environ.get('KDNNP_OUT') or
            DEFAULT_OUT)


def exit_code(error):
    """Map an exception to the process exit status."""
    cause = getattr(error, 'cause', error)
    if isinstance(cause, NonFiniteState):
        return EXIT_UNSTABLE
    if isinstance(cause, C.ConfigError):
        return EXIT_CONFIG
    return EXIT_FAILURE


def run(command, arguments):
    """Execute one subcommand and write the run manifest.

    Returns
    -------
    status : int
        0 on success, 2 for configuration errors, 3 for MD instability,
        1 otherwise.
    """
    try:
        config = C.parse_config(config_path(arguments))
        seed = arguments['--seed']
        driver = kdnnp.driver.Driver(
            config, output_dir(arguments),
            seed=None if seed is None else int(seed),
            n_jobs=int(arguments['--threads']),
            progress=bool(arguments['--verbose']))
        COMMANDS[command](driver, arguments)
        driver.write_manifest()
    except Exception as err:
        status = exit_code(err)
        logger.error(utils.colored("{} failed ({}): {}".format(
            command, status, err), 'red'))
        return status

    print("{} {}".format(command, utils.result_colored(True)))
    return EXIT_OK


def handle_arguments(arguments):
    logger.debug(arguments)
    if arguments['--config-keys']:
        print(C.config_reference())
        return EXIT_OK

    command = [c for c in COMMANDS if arguments.get(c)][0]
    logger.info("Running '{}' with config {} into {}".format(
        command, config_path(arguments), output_dir(arguments)))
    return run(command, arguments)


if __name__ == "__main__":
    arguments = docopt(__doc__)
    kdnnp.logger.init('DEBUG' if arguments['--verbose'] else 'INFO',
                      quiet_steps=not arguments['--verbose'])
    sys.exit(handle_arguments(arguments))
