import copy
import logging
import logging.config

STEP_PREFIX = "[step]"


class StepFilter(logging.Filter):
    """Drop per-step progress records, whose messages start with `prefix`."""
    def __init__(self, prefix=STEP_PREFIX):
        super(StepFilter, self).__init__()
        self.prefix = prefix

    def filter(self, record):
        return not record.getMessage().startswith(self.prefix)


LOGGING_CONFIG = {
    'version': 1,
    'disable_existing_loggers': False,

    'filters': {
        'steps': {
            '()': StepFilter
        }
    },

    'formatters': {
        'standard': {
            'format': '%(asctime)s {%(filename)s:%(name)s} [%(levelname)s] '
                      '%(funcName)s(): %(message)s'
        },
    },
    'handlers': {
        'default': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'standard'
        },
    },
    'loggers': {
        '': {
            'handlers': ['default'],
            'level': 'INFO',
            'propagate': True
        }
    }
}


def init(level='INFO', quiet_steps=False):
    """Install the package logging configuration.

    Parameters
    ----------
    level : str
        Root logger level.

    quiet_steps : bool
        If True, per-step MD / training chatter ("[step] ...") is filtered.
    """
    theconfig = copy.deepcopy(LOGGING_CONFIG)
    theconfig['loggers']['']['level'] = level
    if quiet_steps:
        theconfig['handlers']['default']['filters'] = ['steps']

    logging.config.dictConfig(theconfig)
