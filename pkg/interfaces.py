from abc import ABC, abstractmethod


class InterpolatorInterface(ABC):
    """
    Maps a target direction to weights over the anchors of an AnchorSet.
    """
    scheme: str = None

    @abstractmethod
    def weights(self, target, anchor_set):
        pass

    @abstractmethod
    def expected_entries(self, anchor_set) -> int:
        pass
