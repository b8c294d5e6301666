// Minimal RFC 4180 writer: fields containing a comma, quote, CR or LF are
// quoted and embedded quotes doubled; rows end with CRLF-free "\n".

#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace rtdlab {

std::string csv_field(std::string_view field);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);
// Shortest round-trippable decimal for a double ("%.17g" trimmed).
std::string format_number(double value);

}  // namespace rtdlab
