from .gradcheck import GradCheckReport, grad_check, model_grad_check
from .harness import TrainOptions, TrainRun, evaluate, loss_and_grads, run_training, task_loss
from .losses import cross_entropy_label_smoothed
from .optim import OptimizerState, adam_step, optimizer_step, sgd_step
from .schedule import Schedule
from .tasks import TaskSpec, batch_stream, eval_set, generate
