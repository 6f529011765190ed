# Concrete finite-sum models: the Gaussian linear toy model and the shared-covariance GMM.
