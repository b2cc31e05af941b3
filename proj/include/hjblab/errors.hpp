#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hjblab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define HJBLAB_DEFINE_ERROR(Name)                  \
    class Name : public Error {                    \
    public:                                        \
        using Error::Error;                        \
    }

HJBLAB_DEFINE_ERROR(AdmissibilityError);
HJBLAB_DEFINE_ERROR(SingularDiffusionError);
HJBLAB_DEFINE_ERROR(BlowupError);
HJBLAB_DEFINE_ERROR(StepTooSmallError);
HJBLAB_DEFINE_ERROR(StabilityError);
HJBLAB_DEFINE_ERROR(DimensionError);
HJBLAB_DEFINE_ERROR(MissingGradientError);
HJBLAB_DEFINE_ERROR(QuadratureError);
HJBLAB_DEFINE_ERROR(NoContractionError);
HJBLAB_DEFINE_ERROR(MaxIterError);
HJBLAB_DEFINE_ERROR(ExtrapolationError);
HJBLAB_DEFINE_ERROR(IllConditionedBasisError);
HJBLAB_DEFINE_ERROR(DegenerateWeightsError);
HJBLAB_DEFINE_ERROR(ConfigError);
HJBLAB_DEFINE_ERROR(MissingReportError);

#undef HJBLAB_DEFINE_ERROR

/// Raised when backward continuation fails on some window. Carries the
/// failing window index and the profile (T-t)^{1/2} |G grad v(t)|_inf built
/// so far, which is the blow-up diagnostic.
class ContinuationError : public Error {
public:
    ContinuationError(const std::string& what, std::size_t window,
                      std::vector<std::pair<double, double>> profile)
        : Error(what), window_(window), profile_(std::move(profile)) {}

    std::size_t window() const noexcept { return window_; }
    const std::vector<std::pair<double, double>>& profile() const noexcept { return profile_; }

private:
    std::size_t window_;
    std::vector<std::pair<double, double>> profile_;
};

}  // namespace hjblab
