"""
Event dispatch between the training loop and the things that watch it. It
works like this::

  class PrintLosses:
    def on_log(self, event):
      print(event.data.step, event.data.ce_loss)

  dispatcher = EventDispatcher(TrainEvent)
  dispatcher.add_subscriber(PrintLosses(), TrainEvent.LOG)
  dispatcher.fire(TrainEvent.LOG, record)   # calls PrintLosses.on_log

The metrics writer, the checkpoint writer and the progress logger in
:py:mod:`resmat.train.loop` are all plain subscribers.
"""
from enum import Enum


class TrainEvent(Enum):
    STEP = 'step'
    LOG = 'log'
    CHECKPOINT = 'checkpoint'
    EVAL = 'eval'
    FINISH = 'finish'


class Event:
    """
    .. py:attribute:: name

      Event name as registered in :py:meth:`EventDispatcher.register_event_type`

    .. py:attribute:: data

      Arbitrary data passed to :py:meth:`EventDispatcher.fire`.
    """

    def __init__(self, name, data):
        self.name = name
        self.data = data
        self._is_halted = False

    def stop_propagation(self):
        """
        Prevent any more handlers for this event from firing
        """
        self._is_halted = True


def _event_name(name):
    return name.value if isinstance(name, Enum) else name


class EventDispatcher:
    """
    :param event_types: optional iterable of names (or a string-valued enum
                        class) to register up front

    Collects and calls object methods in response to events.

    For an event ``foo``, your subscriber should have a method ``on_foo()``
    and take one argument, an :py:class:`Event` instance. Subscribers are
    called in the order they were added.
    """

    def __init__(self, event_types=()):
        self.handlers = {}
        for name in event_types:
            self.register_event_type(name)

    def register_event_type(self, name):
        """
        :param str|Enum name: Name of the event. May be a string-valued enum.

        Events must be registered before they are subscribed to or fired, so a
        typo raises ``KeyError`` instead of silently doing nothing.
        """
        self.handlers[_event_name(name)] = []

    def add_subscriber(self, obj, name):
        """
        :param object obj: Object with an ``on_<name>`` method
        :param str|Enum name: Name of the event

        You may subscribe more than once to receive the event multiple times.
        """
        name = _event_name(name)
        if not hasattr(obj, 'on_' + name.lower()):
            raise AttributeError("{!r} has no method on_{}".format(obj, name.lower()))
        self.handlers[name].append(obj)

    def subscribe_all(self, obj):
        """Subscribe *obj* to every registered event it has a handler for"""
        for name in self.handlers:
            if hasattr(obj, 'on_' + name.lower()):
                self.handlers[name].append(obj)

    def remove_subscriber(self, obj, name):
        self.handlers[_event_name(name)].remove(obj)

    def fire(self, name, data=None):
        """
        :param str|Enum name: Name of the event
        :param data: Arbitrary data to add to the :py:class:`Event`.
        :returns: the :py:class:`Event`
        """
        name = _event_name(name)
        method_name = 'on_' + name.lower()
        event = Event(name, data)
        for obj in self.handlers[name]:
            getattr(obj, method_name)(event)
            if event._is_halted:
                break
        return event
