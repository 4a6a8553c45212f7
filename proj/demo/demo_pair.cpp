// Two orthogonal templates, pure noise: the K-means estimate of x0 still correlates with x0.
#include "biaslab/engine.hpp"
#include "biaslab/oracle.hpp"
#include "biaslab/theory.hpp"

#include <cstdio>

int main() {
    using namespace biaslab;
    const TemplateSet set = make_pair(0.0, 2);
    ExperimentConfig cfg;
    cfg.M = 1'000'000;
    cfg.seed = 7;

    const auto hard = hard_assign(set, cfg);
    const auto th = hard_pair_prediction(0.0);
    std::printf("hard:  <xhat0,x0> = %.4f +- %.4f   closed form %.4f\n", hard.corr(0, 0), hard.std_error(0, 0),
                th.predicted_corr(0, 0));

    cfg.beta = 1.0;
    const auto soft = soft_assign(set, cfg);
    const auto o = soft_moments(gram(set), 1.0, 0);
    std::printf("soft:  <xhat0,x0> = %.4f +- %.4f   oracle %.4f   logistic approx %.4f\n", soft.corr(0, 0),
                soft.std_error(0, 0), o.ratio()[0], soft_pair_prediction(0.0).predicted_corr(0, 0));
}
