package testcases.CWE78_OS_Command_Injection;

import testcasesupport.*;

public class CWE78_OS_Command_Injection__listen_tcp_54b extends AbstractTestCase
{
    public void badSink(String data) throws Throwable
    {
        IO.writeLine(data);
    }

    public void good() throws Throwable
    {
    }
}
