#include "scorewatch/program.hpp"

#include <cmath>

namespace scorewatch {

std::vector<std::string> ModelProgram::labels() const {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(dim()));
  for (int i = 0; i < dim(); ++i) out.push_back("theta" + std::to_string(i + 1));
  return out;
}

bool ModelProgram::in_domain(const Eigen::VectorXd& theta) const {
  return theta.size() == dim() && theta.allFinite();
}

Eigen::VectorXd ModelProgram::init_guess(const ObservationSequence&) const {
  return Eigen::VectorXd::Zero(dim());
}

void ModelProgram::check_segment(const ObservationSequence& data, int s, int t) const {
  if (s < 1 || t < s || t > data.n()) {
    throw DomainError("segment [" + std::to_string(s) + ", " + std::to_string(t) +
                      "] out of range for n=" + std::to_string(data.n()));
  }
}

void ModelProgram::check_data(const ObservationSequence& data) const {
  if (data.prefix_len != known_prefix()) {
    throw DomainError("model requires a known prefix of length " +
                      std::to_string(known_prefix()) + ", data has " +
                      std::to_string(data.prefix_len));
  }
  const int c = covariate_dim();
  if (c >= 0 && static_cast<int>(data.covariates.cols()) != c) {
    throw DomainError("model expects " + std::to_string(c) + " covariate columns, data has " +
                      std::to_string(data.covariates.cols()));
  }
  if (c >= 0 && static_cast<int>(data.covariates.rows()) != data.n()) {
    throw DomainError("covariate rows do not match observation count");
  }
}

ad::Tape ModelProgram::record(const ObservationSequence& data, int s, int t) const {
  check_data(data);
  check_segment(data, s, t);
  ad::TapeBuilder builder(dim(), s);
  std::vector<ad::Var> theta;
  theta.reserve(static_cast<std::size_t>(dim()));
  for (int i = 0; i < dim(); ++i) theta.push_back(builder.param(i));
  record_terms(builder, theta, data, s, t);
  return builder.finish();
}

namespace {

void require_domain(const ModelProgram& program, const Eigen::VectorXd& theta) {
  if (!program.in_domain(theta)) {
    throw DomainError("theta outside the admissible domain of model '" + program.kind() + "'");
  }
}

}  // namespace

double evaluate(const ModelProgram& program, const Eigen::VectorXd& theta,
                const ObservationSequence& data, int s, int t) {
  require_domain(program, theta);
  const ad::Tape tape = program.record(data, s, t);
  ad::Workspace ws(tape);
  ws.forward(theta);
  return tape.root() < 0 ? 0.0 : ws.checked_value(tape.root());
}

Eigen::VectorXd gradient(const ModelProgram& program, const Eigen::VectorXd& theta,
                         const ObservationSequence& data, int s, int t) {
  require_domain(program, theta);
  const ad::Tape tape = program.record(data, s, t);
  ad::Workspace ws(tape);
  ws.forward(theta);
  if (tape.root() >= 0) ws.checked_value(tape.root());
  Eigen::VectorXd g(program.dim());
  ws.gradient(tape.root(), g);
  return g;
}

Eigen::VectorXd hvp(const ModelProgram& program, const Eigen::VectorXd& theta,
                    const ObservationSequence& data, int s, int t, const Eigen::VectorXd& v) {
  require_domain(program, theta);
  if (!v.allFinite()) throw DomainError("hvp direction must be finite");
  const ad::Tape tape = program.record(data, s, t);
  ad::Workspace ws(tape);
  ws.forward(theta);
  if (tape.root() >= 0) ws.checked_value(tape.root());
  Eigen::VectorXd hv(program.dim());
  ws.set_tangent(v, tape.root() + 1);
  ws.grad_tangent(tape.root(), hv);
  return -hv;  // observed information is the negated Hessian
}

Eigen::MatrixXd full_hessian(const ModelProgram& program, const Eigen::VectorXd& theta,
                             const ObservationSequence& data, int s, int t, int dim_cap) {
  const int d = program.dim();
  if (d > dim_cap) {
    throw SizeError("dense information of dimension " + std::to_string(d) +
                    " exceeds the cap " + std::to_string(dim_cap));
  }
  require_domain(program, theta);
  const ad::Tape tape = program.record(data, s, t);
  ad::Workspace ws(tape);
  ws.forward(theta);
  if (tape.root() >= 0) ws.checked_value(tape.root());
  Eigen::MatrixXd info(d, d);
  Eigen::VectorXd col(d);
  Eigen::VectorXd basis = Eigen::VectorXd::Zero(d);
  for (int j = 0; j < d; ++j) {
    basis[j] = 1.0;
    ws.set_tangent(basis, tape.root() + 1);
    ws.grad_tangent(tape.root(), col);
    info.col(j) = -col;
    basis[j] = 0.0;
  }
  const double scale = info.norm();
  const double defect = (info - info.transpose()).norm();
  if (scale > 0.0 && defect > 1e-8 * scale) {
    throw NumericError("observed information symmetry defect " + std::to_string(defect), -1);
  }
  info = ((info + info.transpose()) * 0.5).eval();
  return info;
}

}  // namespace scorewatch
