from abc import ABC, abstractmethod
from pathlib import Path


class AbstractLoader(ABC):
    """Abstract class that provides an interface to load stage artifacts.

    Parameters
    ----------
    directory : str or Path
        Directory the stage wrote its artifacts to.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        r"""Path of one artifact, which must exist.

        Parameters
        ----------
        name : str
            File name within the stage directory.

        Returns
        -------
        Path
            Path to the artifact.
        """
        path = self.directory / name
        if not path.exists():
            raise FileNotFoundError(f"Missing artifact {path}")
        return path

    @abstractmethod
    def load(self):
        """Load the artifacts of the stage.

        Returns
        -------
        object
            Loaded artifacts.
        """
        raise NotImplementedError
