import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Process-level settings for the training library and CLI"""

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'logs/unrolled_training.log')

    # Artifacts
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'runs')

    # Gradient check suite
    GRADCHECK_TRIALS = int(os.getenv('GRADCHECK_TRIALS', 100))
    GRADCHECK_TOLERANCE = float(os.getenv('GRADCHECK_TOLERANCE', 1e-4))
    GRADCHECK_SEED = int(os.getenv('GRADCHECK_SEED', 0))

    @classmethod
    def setup_logging(cls):
        """Setup logging configuration"""
        directory = os.path.dirname(cls.LOG_FILE)
        if directory:
            os.makedirs(directory, exist_ok=True)

        logging.basicConfig(
            level=getattr(logging, cls.LOG_LEVEL.upper()),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(cls.LOG_FILE),
                logging.StreamHandler()
            ]
        )

        return logging.getLogger(__name__)

    @classmethod
    def validate_config(cls):
        """Validate environment settings"""
        problems = []
        if not isinstance(getattr(logging, cls.LOG_LEVEL.upper(), None), int):
            problems.append(f"LOG_LEVEL={cls.LOG_LEVEL}")
        if cls.GRADCHECK_TRIALS < 1:
            problems.append(f"GRADCHECK_TRIALS={cls.GRADCHECK_TRIALS}")
        if not cls.GRADCHECK_TOLERANCE > 0:
            problems.append(f"GRADCHECK_TOLERANCE={cls.GRADCHECK_TOLERANCE}")
        if not cls.OUTPUT_DIR:
            problems.append("OUTPUT_DIR is empty")

        if problems:
            raise ValueError(f"Invalid configuration: {', '.join(problems)}")

        return True
