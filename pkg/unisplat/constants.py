Z_MIN = 1e-4

ALPHA_MAX = 0.999
COV2D_REG = 0.1
TRANSMITTANCE_MIN = 1e-4
CULL_SIGMAS = 3.0
SUPPORT_SIGMAS = 6.0

FANOUT = 10
SEM_DIM = 64
EPS_DIM = 11
RECORD_DIM = 3 + EPS_DIM + SEM_DIM

SCALE_MIN = 1e-4
SCALE_MAX = 1.0

HUBER_DELTA = 0.1
LAMBDA_SSIM = 0.2
LAMBDA_POSE = 10.0
LAMBDA_POINT = 1.0
COS_EPS = 1e-6
REPROJ_TOLERANCE_PX = 2.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PSNR_CAP = 99.0
TAU_THRESHOLD = 1.25
POSE_AUC_THRESHOLDS = (5, 10, 20)
DEPTH_VALID_ALPHA = 0.5

CHECKPOINT_MAGIC = b"USPCKPT1"
PLANE_MAGIC = b"USPL"
