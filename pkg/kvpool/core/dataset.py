import os
from os.path import isfile, join

import pandas as pd
import yaml

from kvpool.core.utils.logging_utils import check_directory_exists_and_if_not_mkdir, logger
from kvpool.core.utils.misc import get_version


class KVPoolDataset:
    """Generic container of tables plus the settings that produced them, with save /
    load methods.

    A dataset is stored as a directory: one CSV file per table, ``settings.yaml``
    and ``metadata.yaml``. Subclasses name their tables through data_keys.
    """

    dataset_type = "kvpool_dataset"

    def __init__(self, directory=None, dictionary=None, data_keys=None):
        """
        For constructing, provide either directory, or dictionary containing data and
        settings entries, or neither.

        Parameters
        ----------
        directory : str
            Directory previously written by to_directory.
        dictionary : dict
            Contains settings and data entries. The data keys should be the same as
            data_keys.
        data_keys : list
            Tables that should be saved / loaded.
        """
        self._data_keys = list(data_keys or [])
        for key in self._data_keys:
            vars(self)[key] = None
        self.settings = None
        self.version = None

        if directory is not None:
            self.from_directory(directory)
        elif dictionary is not None:
            self.from_dictionary(dictionary)

    def to_directory(self, directory):
        check_directory_exists_and_if_not_mkdir(directory, logger)
        for key in self._data_keys:
            table = vars(self)[key]
            if table is None:
                continue
            if not isinstance(table, pd.DataFrame):
                raise TypeError(f"Cannot save datatype {type(table)} as a table.")
            table.to_csv(join(directory, f"{key}.csv"), index=False, lineterminator="\n")
        if self.settings is not None:
            with open(join(directory, "settings.yaml"), "w") as f:
                yaml.dump(self.settings, f, default_flow_style=False, sort_keys=False)
        with open(join(directory, "metadata.yaml"), "w") as f:
            yaml.dump(
                {"dataset_type": self.dataset_type, "version": self.version},
                f,
                default_flow_style=False,
            )

    def from_directory(self, directory):
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"{directory} is not a directory")
        for key in self._data_keys:
            file_name = join(directory, f"{key}.csv")
            if isfile(file_name):
                vars(self)[key] = pd.read_csv(file_name, keep_default_na=False, na_values=[""])
        settings_file = join(directory, "settings.yaml")
        if isfile(settings_file):
            with open(settings_file, "r") as f:
                self.settings = yaml.safe_load(f)
        metadata_file = join(directory, "metadata.yaml")
        if isfile(metadata_file):
            with open(metadata_file, "r") as f:
                self.version = (yaml.safe_load(f) or {}).get("version")

    def to_dictionary(self):
        return {
            k: v
            for k, v in vars(self).items()
            if (k in self._data_keys or k in ("settings", "version")) and v is not None
        }

    def from_dictionary(self, dictionary: dict):
        for k, v in dictionary.items():
            if k in self._data_keys or k in ("settings", "version"):
                vars(self)[k] = v
        if self.version is None:
            self.version = f"kvpool={get_version()}"
