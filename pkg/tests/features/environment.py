BEHAVE_DEBUG_ON_ERROR = False


def before_all(context):
    context.lab = {}
    context.runs = {}
